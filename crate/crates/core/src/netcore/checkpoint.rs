//! Binary snapshot of a network: an 8-byte magic, a little-endian u64
//! header length, a JSON header describing the architecture, then every
//! parameter as little-endian f64 in `params()` order (row-major).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{BlockKind, Composition, Head, ResidualNet};
use crate::error::{LabError, Result};

const MAGIC: &[u8; 8] = b"RPTRNET1";

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum BlockHeader {
    ReluMlp { hidden: usize, prenorm: bool },
    Linear,
    LinearLn,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum HeadHeader {
    ScalarReadout,
    NormalizedLinear { rows: usize },
    Identity,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    d: usize,
    composition: Composition,
    blocks: Vec<BlockHeader>,
    head: HeadHeader,
}

fn bad(msg: impl Into<String>) -> LabError {
    LabError::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(net: &ResidualNet, mut out: W) -> Result<()> {
    let header = Header {
        d: net.width(),
        composition: net.composition(),
        blocks: net
            .blocks()
            .iter()
            .map(|b| match b {
                BlockKind::ReluMlp { w, prenorm, .. } => BlockHeader::ReluMlp {
                    hidden: w.nrows(),
                    prenorm: *prenorm,
                },
                BlockKind::Linear { .. } => BlockHeader::Linear,
                BlockKind::LinearLn { .. } => BlockHeader::LinearLn,
            })
            .collect(),
        head: match net.head() {
            Head::ScalarReadout { .. } => HeadHeader::ScalarReadout,
            Head::NormalizedLinear { v } => HeadHeader::NormalizedLinear { rows: v.nrows() },
            Head::Identity => HeadHeader::Identity,
        },
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    let params = net.blocks().iter().flat_map(|b| b.params()).chain(net.head().params());
    for p in params {
        for x in p.iter() {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_matrix<R: Read>(input: &mut R, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let mut buf = vec![0u8; rows * cols * 8];
    input
        .read_exact(&mut buf)
        .map_err(|_| bad("payload shorter than the header implies"))?;
    let data = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("shape matches length"))
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ResidualNet> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|_| bad("missing magic"))?;
    if &magic != MAGIC {
        return Err(bad("not a network checkpoint"));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len).map_err(|_| bad("missing header length"))?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 24 {
        return Err(bad("header too large"));
    }
    let mut json = vec![0u8; len as usize];
    input.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("header: {e}")))?;
    let d = header.d;
    if d == 0 {
        return Err(bad("zero width"));
    }
    let mut blocks = Vec::with_capacity(header.blocks.len());
    for b in &header.blocks {
        blocks.push(match *b {
            BlockHeader::ReluMlp { hidden, prenorm } => {
                let w = read_matrix(&mut input, hidden, d)?;
                let c = read_matrix(&mut input, d, hidden)?;
                BlockKind::ReluMlp { w, c, prenorm }
            }
            BlockHeader::Linear => BlockKind::Linear {
                w: read_matrix(&mut input, d, d)?,
            },
            BlockHeader::LinearLn => BlockKind::LinearLn {
                w: read_matrix(&mut input, d, d)?,
            },
        });
    }
    let head = match header.head {
        HeadHeader::ScalarReadout => {
            let v = read_matrix(&mut input, 1, d)?;
            Head::ScalarReadout {
                v: Array1::from_iter(v.iter().copied()),
            }
        }
        HeadHeader::NormalizedLinear { rows } => Head::NormalizedLinear {
            v: read_matrix(&mut input, rows, d)?,
        },
        HeadHeader::Identity => Head::Identity,
    };
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after payload"));
    }
    ResidualNet::new(blocks, header.composition, head).map_err(|e| bad(e.to_string()))
}

pub fn save_checkpoint(net: &ResidualNet, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(net, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ResidualNet> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

//! Gated residual networks: forward and reverse-mode passes with a per-layer
//! output multiplier, the block kinds used by the experiments, and the
//! output heads.
//!
//! Every pass works on a batch stored row-wise (`n × d`). A layer whose
//! multiplier is zero is bypassed entirely: its block is not evaluated and
//! its parameter gradient is exactly zero.

mod checkpoint;
mod gradcheck;
mod scaling;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, LabError, Result};
use crate::numkit::{gauss_matrix, gauss_vector, row_norms, RngStream};

pub use gradcheck::gradient_check;
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use scaling::{h_sqrt, unit_scales};

/// How consecutive blocks are composed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    /// `y_l = y_{l-1} + s_l f_l(y_{l-1})`
    Residual,
    /// `y_l = s_l f_l(y_{l-1})`, with a skipped layer acting as identity.
    Plain,
}

/// One residual block with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum BlockKind {
    /// `C relu(W z)`, `W: m×d`, `C: d×m`. With `prenorm`, `z = √d·y/‖y‖`,
    /// otherwise `z = y`.
    ReluMlp {
        w: Array2<f64>,
        c: Array2<f64>,
        prenorm: bool,
    },
    /// `W y`
    Linear { w: Array2<f64> },
    /// `W y / ‖y‖`
    LinearLn { w: Array2<f64> },
}

/// Output head applied to `y^(L)`.
#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    /// Trainable scalar `⟨v, y⟩`.
    ScalarReadout { v: Array1<f64> },
    /// `V y/‖y‖`, scale invariant in `y`.
    NormalizedLinear { v: Array2<f64> },
    Identity,
}

/// Multiplier per layer; zero means the layer is dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalePattern(pub Vec<f64>);

impl ScalePattern {
    pub fn ones(len: usize) -> Self {
        Self(vec![1.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn active(&self, layer: usize) -> bool {
        self.0[layer] > 0.0
    }

    pub fn active_count(&self) -> usize {
        self.0.iter().filter(|&&s| s > 0.0).count()
    }
}

/// Hidden-unit selection for a ReluMlp block (width subnetworks).
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenMask {
    /// 0/1 per hidden unit.
    pub keep: Array1<f64>,
    /// Multiplier applied to the kept units.
    pub gain: f64,
}

impl HiddenMask {
    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k != 0.0).count()
    }
}

#[derive(Clone, Debug)]
enum BlockCache {
    Mlp {
        z: Array2<f64>,
        norms: Option<Array1<f64>>,
        pre: Array2<f64>,
        hidden: Array2<f64>,
    },
    Linear,
    LinearLn {
        unit: Array2<f64>,
        norms: Array1<f64>,
    },
    Skipped,
}

/// Everything a forward pass records for the matching backward pass.
#[derive(Clone, Debug)]
pub struct ForwardTape {
    /// `y^(0) .. y^(L)`, each `n × d`.
    pub states: Vec<Array2<f64>>,
    pub scales: ScalePattern,
    /// Head output, `n × out_dim`.
    pub output: Array2<f64>,
    masks: Vec<Option<HiddenMask>>,
    caches: Vec<BlockCache>,
    fingerprint: (usize, usize),
}

impl ForwardTape {
    pub fn input(&self) -> &Array2<f64> {
        &self.states[0]
    }

    pub fn last_state(&self) -> &Array2<f64> {
        self.states.last().expect("tape always holds y^(0)")
    }

    pub fn batch_size(&self) -> usize {
        self.states[0].nrows()
    }
}

/// Parameter gradients laid out like the network's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<Vec<Array2<f64>>>,
    pub head: Vec<Array2<f64>>,
    /// Gradient with respect to the network input.
    pub input: Array2<f64>,
}

impl Gradients {
    pub fn scale(&mut self, factor: f64) {
        for g in self.blocks.iter_mut().flatten().chain(self.head.iter_mut()) {
            g.mapv_inplace(|x| x * factor);
        }
        self.input.mapv_inplace(|x| x * factor);
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks
            .iter()
            .flatten()
            .chain(self.head.iter())
            .flat_map(|g| g.iter())
            .fold(0.0f64, |a, &b| a.max(b.abs()))
    }
}

impl BlockKind {
    pub fn width(&self) -> usize {
        match self {
            BlockKind::ReluMlp { w, .. } => w.ncols(),
            BlockKind::Linear { w } | BlockKind::LinearLn { w } => w.ncols(),
        }
    }

    pub fn hidden(&self) -> Option<usize> {
        match self {
            BlockKind::ReluMlp { w, .. } => Some(w.nrows()),
            _ => None,
        }
    }

    pub fn params(&self) -> Vec<ArrayView2<'_, f64>> {
        match self {
            BlockKind::ReluMlp { w, c, .. } => vec![w.view(), c.view()],
            BlockKind::Linear { w } | BlockKind::LinearLn { w } => vec![w.view()],
        }
    }

    pub fn params_mut(&mut self) -> Vec<ArrayViewMut2<'_, f64>> {
        match self {
            BlockKind::ReluMlp { w, c, .. } => vec![w.view_mut(), c.view_mut()],
            BlockKind::Linear { w } | BlockKind::LinearLn { w } => vec![w.view_mut()],
        }
    }

    pub fn zero_grads(&self) -> Vec<Array2<f64>> {
        self.params().iter().map(|p| Array2::zeros(p.raw_dim())).collect()
    }

    fn check_shapes(&self, d: usize) -> Result<()> {
        match self {
            BlockKind::ReluMlp { w, c, .. } => {
                if w.ncols() != d || c.nrows() != d || c.ncols() != w.nrows() {
                    return dim_err(format!(
                        "relu mlp shapes W {:?}, C {:?} for width {d}",
                        w.shape(),
                        c.shape()
                    ));
                }
            }
            BlockKind::Linear { w } | BlockKind::LinearLn { w } => {
                if w.nrows() != d || w.ncols() != d {
                    return dim_err(format!("linear block {:?} for width {d}", w.shape()));
                }
            }
        }
        Ok(())
    }

    fn forward(&self, y: &Array2<f64>, mask: Option<&HiddenMask>) -> (Array2<f64>, BlockCache) {
        match self {
            BlockKind::ReluMlp { w, c, prenorm } => {
                let (z, norms) = if *prenorm {
                    let norms = row_norms(y.view());
                    let root_d = (y.ncols() as f64).sqrt();
                    let mut z = y.clone();
                    for (mut row, &n) in z.axis_iter_mut(Axis(0)).zip(norms.iter()) {
                        row *= root_d / n;
                    }
                    (z, Some(norms))
                } else {
                    (y.clone(), None)
                };
                let pre = z.dot(&w.t());
                let mut hidden = pre.mapv(|a| a.max(0.0));
                if let Some(m) = mask {
                    let factor = &m.keep * m.gain;
                    hidden *= &factor;
                }
                let out = hidden.dot(&c.t());
                (out, BlockCache::Mlp { z, norms, pre, hidden })
            }
            BlockKind::Linear { w } => (y.dot(&w.t()), BlockCache::Linear),
            BlockKind::LinearLn { w } => {
                let norms = row_norms(y.view());
                let mut unit = y.clone();
                for (mut row, &n) in unit.axis_iter_mut(Axis(0)).zip(norms.iter()) {
                    row /= n;
                }
                (unit.dot(&w.t()), BlockCache::LinearLn { unit, norms })
            }
        }
    }

    /// Returns (parameter grads, input grad) given the gradient `g` of the
    /// block output.
    fn backward(
        &self,
        y: &Array2<f64>,
        g: &Array2<f64>,
        cache: &BlockCache,
        mask: Option<&HiddenMask>,
    ) -> (Vec<Array2<f64>>, Array2<f64>) {
        match (self, cache) {
            (BlockKind::ReluMlp { w, c, .. }, BlockCache::Mlp { z, norms, pre, hidden }) => {
                let dc = g.t().dot(hidden);
                let mut dpre = g.dot(c);
                Zip::from(&mut dpre).and(pre).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                if let Some(m) = mask {
                    let factor = &m.keep * m.gain;
                    dpre *= &factor;
                }
                let dw = dpre.t().dot(z);
                let dz = dpre.dot(w);
                let dy = match norms {
                    Some(norms) => {
                        let root_d = (y.ncols() as f64).sqrt();
                        project_out_radial(y, &dz, norms, root_d)
                    }
                    None => dz,
                };
                (vec![dw, dc], dy)
            }
            (BlockKind::Linear { w }, BlockCache::Linear) => (vec![g.t().dot(y)], g.dot(w)),
            (BlockKind::LinearLn { w }, BlockCache::LinearLn { unit, norms }) => {
                let dw = g.t().dot(unit);
                let du = g.dot(w);
                (vec![dw], project_out_radial(y, &du, norms, 1.0))
            }
            _ => unreachable!("cache kind always matches block kind"),
        }
    }
}

/// Backward through `y ↦ k·y/‖y‖`: `k (g − u⟨u,g⟩)/‖y‖` row-wise.
fn project_out_radial(y: &Array2<f64>, g: &Array2<f64>, norms: &Array1<f64>, k: f64) -> Array2<f64> {
    let mut out = g.clone();
    for ((mut row, yrow), &n) in out.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))).zip(norms.iter()) {
        let radial = row.dot(&yrow) / (n * n);
        row.scaled_add(-radial, &yrow);
        row *= k / n;
    }
    out
}

impl Head {
    pub fn out_dim(&self, d: usize) -> usize {
        match self {
            Head::ScalarReadout { .. } => 1,
            Head::NormalizedLinear { v } => v.nrows(),
            Head::Identity => d,
        }
    }

    pub fn params(&self) -> Vec<ArrayView2<'_, f64>> {
        match self {
            Head::ScalarReadout { v } => vec![v.view().insert_axis(Axis(0))],
            Head::NormalizedLinear { v } => vec![v.view()],
            Head::Identity => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<ArrayViewMut2<'_, f64>> {
        match self {
            Head::ScalarReadout { v } => vec![v.view_mut().insert_axis(Axis(0))],
            Head::NormalizedLinear { v } => vec![v.view_mut()],
            Head::Identity => vec![],
        }
    }

    pub fn zero_grads(&self) -> Vec<Array2<f64>> {
        self.params().iter().map(|p| Array2::zeros(p.raw_dim())).collect()
    }

    fn check_shapes(&self, d: usize) -> Result<()> {
        let ok = match self {
            Head::ScalarReadout { v } => v.len() == d,
            Head::NormalizedLinear { v } => v.ncols() == d && v.nrows() >= 1,
            Head::Identity => true,
        };
        if ok {
            Ok(())
        } else {
            dim_err(format!("head does not match width {d}"))
        }
    }

    /// Applies the head to a batch of final states.
    pub fn apply(&self, y: ArrayView2<f64>) -> Array2<f64> {
        match self {
            Head::ScalarReadout { v } => y.dot(v).insert_axis(Axis(1)),
            Head::NormalizedLinear { v } => {
                let norms = row_norms(y);
                let mut unit = y.to_owned();
                for (mut row, &n) in unit.axis_iter_mut(Axis(0)).zip(norms.iter()) {
                    row /= n;
                }
                unit.dot(&v.t())
            }
            Head::Identity => y.to_owned(),
        }
    }

    /// (parameter grads, gradient wrt the head input).
    pub fn backward(&self, y: ArrayView2<f64>, upstream: ArrayView2<f64>) -> (Vec<Array2<f64>>, Array2<f64>) {
        match self {
            Head::ScalarReadout { v } => {
                let up = upstream.column(0);
                let dv = y.t().dot(&up).insert_axis(Axis(0));
                let dy = up
                    .to_owned()
                    .insert_axis(Axis(1))
                    .dot(&v.view().insert_axis(Axis(0)));
                (vec![dv], dy)
            }
            Head::NormalizedLinear { v } => {
                let norms = row_norms(y);
                let mut unit = y.to_owned();
                for (mut row, &n) in unit.axis_iter_mut(Axis(0)).zip(norms.iter()) {
                    row /= n;
                }
                let dv = upstream.t().dot(&unit);
                let du = upstream.dot(v);
                let dy = project_out_radial(&y.to_owned(), &du, &norms, 1.0);
                (vec![dv], dy)
            }
            Head::Identity => (vec![], upstream.to_owned()),
        }
    }
}

/// An ordered stack of blocks sharing width `d`, plus an output head.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualNet {
    blocks: Vec<BlockKind>,
    composition: Composition,
    head: Head,
    d: usize,
}

impl ResidualNet {
    pub fn new(blocks: Vec<BlockKind>, composition: Composition, head: Head) -> Result<Self> {
        let Some(first) = blocks.first() else {
            return arg_err("a network needs at least one block");
        };
        let d = first.width();
        for b in &blocks {
            b.check_shapes(d)?;
            if composition == Composition::Plain && matches!(b, BlockKind::ReluMlp { .. }) {
                return arg_err("plain composition is only defined for linear blocks");
            }
        }
        head.check_shapes(d)?;
        Ok(Self {
            blocks,
            composition,
            head,
            d,
        })
    }

    /// Residual ReLU-MLP stack with `W ~ N(0, 2/m)`, `C ~ N(0, 1/d)` and a
    /// scalar readout `v ~ N(0, readout_std²)` (zero when `readout_std == 0`).
    pub fn relu_mlp(
        d: usize,
        hidden: usize,
        layers: usize,
        prenorm: bool,
        readout_std: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if d == 0 || hidden == 0 || layers == 0 {
            return arg_err("relu_mlp needs positive d, hidden and layers");
        }
        let mut blocks = Vec::with_capacity(layers);
        for _ in 0..layers {
            let w = gauss_matrix(hidden, d, (2.0 / hidden as f64).sqrt(), rng)?;
            let c = gauss_matrix(d, hidden, (1.0 / d as f64).sqrt(), rng)?;
            blocks.push(BlockKind::ReluMlp { w, c, prenorm });
        }
        let v = if readout_std > 0.0 {
            gauss_vector(d, readout_std, rng)?
        } else {
            Array1::zeros(d)
        };
        Self::new(blocks, Composition::Residual, Head::ScalarReadout { v })
    }

    pub fn blocks(&self) -> &[BlockKind] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [BlockKind] {
        &mut self.blocks
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Head {
        &mut self.head
    }

    pub fn composition(&self) -> Composition {
        self.composition
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn width(&self) -> usize {
        self.d
    }

    pub fn out_dim(&self) -> usize {
        self.head.out_dim(self.d)
    }

    /// The network made of the kept blocks only, in order. Errors if
    /// nothing is kept.
    pub fn sub_network(&self, keep: &[bool]) -> Result<Self> {
        if keep.len() != self.depth() {
            return dim_err(format!("keep mask of length {} for depth {}", keep.len(), self.depth()));
        }
        let blocks: Vec<_> = self
            .blocks
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(b, _)| b.clone())
            .collect();
        Self::new(blocks, self.composition, self.head.clone())
    }

    /// Replaces the block list (used by growth operators).
    pub fn with_blocks(&self, blocks: Vec<BlockKind>) -> Result<Self> {
        Self::new(blocks, self.composition, self.head.clone())
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            blocks: self.blocks.iter().map(BlockKind::zero_grads).collect(),
            head: self.head.zero_grads(),
            input: Array2::zeros((0, self.d)),
        }
    }

    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.params())
            .chain(self.head.params())
            .map(|p| p.len())
            .sum()
    }

    /// Forward pass for a single input vector.
    pub fn forward_one(&self, x: ArrayView1<f64>, scales: &ScalePattern) -> Result<ForwardTape> {
        self.forward(x.insert_axis(Axis(0)), scales)
    }

    pub fn forward(&self, x: ArrayView2<f64>, scales: &ScalePattern) -> Result<ForwardTape> {
        self.forward_masked(x, scales, &vec![None; self.depth()])
    }

    /// Forward pass with optional hidden-unit masks for ReluMlp blocks.
    pub fn forward_masked(
        &self,
        x: ArrayView2<f64>,
        scales: &ScalePattern,
        masks: &[Option<HiddenMask>],
    ) -> Result<ForwardTape> {
        let depth = self.depth();
        if x.ncols() != self.d {
            return dim_err(format!("input width {} for network width {}", x.ncols(), self.d));
        }
        if scales.len() != depth || masks.len() != depth {
            return dim_err(format!(
                "scale pattern of length {} / {} masks for depth {depth}",
                scales.len(),
                masks.len()
            ));
        }
        if scales.0.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
            return arg_err("scales must be finite and nonnegative");
        }
        for (b, m) in self.blocks.iter().zip(masks) {
            if let Some(m) = m {
                match b.hidden() {
                    Some(h) if h == m.keep.len() => {}
                    _ => return dim_err("hidden mask does not match block"),
                }
            }
        }

        let mut states = Vec::with_capacity(depth + 1);
        let mut caches = Vec::with_capacity(depth);
        states.push(x.to_owned());
        for (l, block) in self.blocks.iter().enumerate() {
            let prev = &states[l];
            let s = scales.0[l];
            let next = if s > 0.0 {
                let (out, cache) = block.forward(prev, masks[l].as_ref());
                caches.push(cache);
                match self.composition {
                    Composition::Residual => {
                        let mut y = prev.clone();
                        y.scaled_add(s, &out);
                        y
                    }
                    Composition::Plain => out * s,
                }
            } else {
                caches.push(BlockCache::Skipped);
                prev.clone()
            };
            if next.iter().any(|v| !v.is_finite()) {
                return Err(LabError::NonFinite { layer: l + 1 });
            }
            states.push(next);
        }
        let output = self.head.apply(states[depth].view());
        if output.iter().any(|v| !v.is_finite()) {
            return Err(LabError::NonFinite { layer: depth + 1 });
        }
        Ok(ForwardTape {
            states,
            scales: scales.clone(),
            output,
            masks: masks.to_vec(),
            caches,
            fingerprint: (depth, self.d),
        })
    }

    /// Runs blocks `start..L` on `state` (taken as `y^(start)`) and returns
    /// the final state. Scales for blocks before `start` are ignored.
    pub fn forward_tail(&self, start: usize, state: ArrayView2<f64>, scales: &ScalePattern) -> Result<Array2<f64>> {
        if start > self.depth() || scales.len() != self.depth() || state.ncols() != self.d {
            return dim_err("tail forward arguments do not match the network");
        }
        let mut y = state.to_owned();
        for l in start..self.depth() {
            let s = scales.0[l];
            if s > 0.0 {
                let (out, _) = self.blocks[l].forward(&y, None);
                y = match self.composition {
                    Composition::Residual => {
                        y.scaled_add(s, &out);
                        y
                    }
                    Composition::Plain => out * s,
                };
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(LabError::NonFinite { layer: l + 1 });
                }
            }
        }
        Ok(y)
    }

    /// Reverse pass. `upstream` is the gradient of the loss with respect to
    /// the head output (`n × out_dim`).
    pub fn backward(&self, tape: &ForwardTape, upstream: ArrayView2<f64>) -> Result<Gradients> {
        let depth = self.depth();
        if tape.fingerprint != (depth, self.d) || tape.caches.len() != depth {
            return dim_err("tape was produced by a different network");
        }
        if upstream.dim() != tape.output.dim() {
            return dim_err(format!(
                "upstream {:?} does not match head output {:?}",
                upstream.dim(),
                tape.output.dim()
            ));
        }
        let (head_grads, mut g) = self.head.backward(tape.states[depth].view(), upstream);
        let mut block_grads = vec![Vec::new(); depth];
        for l in (0..depth).rev() {
            let block = &self.blocks[l];
            let s = tape.scales.0[l];
            if s == 0.0 {
                block_grads[l] = block.zero_grads();
                // skipped layer is the identity in both compositions
                continue;
            }
            let g_out = &g * s;
            let (pgrads, g_in) = block.backward(&tape.states[l], &g_out, &tape.caches[l], tape.masks[l].as_ref());
            block_grads[l] = pgrads;
            g = match self.composition {
                Composition::Residual => g + g_in,
                Composition::Plain => g_in,
            };
        }
        Ok(Gradients {
            blocks: block_grads,
            head: head_grads,
            input: g,
        })
    }
}

/// Squared loss `(pred − target)²` and its derivative `2(pred − target)`.
pub fn loss_squared(pred: f64, target: f64) -> (f64, f64) {
    let r = pred - target;
    (r * r, 2.0 * r)
}

/// Mean squared loss over a batch of scalar predictions, with the gradient
/// with respect to each prediction (already divided by the batch size).
pub fn batch_squared_loss(pred: ArrayView2<f64>, target: ArrayView1<f64>) -> Result<(f64, Array2<f64>)> {
    if pred.ncols() != 1 || pred.nrows() != target.len() {
        return dim_err(format!("predictions {:?} vs {} targets", pred.dim(), target.len()));
    }
    let n = target.len() as f64;
    let mut grad = Array2::zeros(pred.raw_dim());
    let mut total = 0.0;
    for i in 0..target.len() {
        let (l, g) = loss_squared(pred[[i, 0]], target[i]);
        total += l;
        grad[[i, 0]] = g / n;
    }
    Ok((total / n, grad))
}

#[cfg(test)]
mod tests;

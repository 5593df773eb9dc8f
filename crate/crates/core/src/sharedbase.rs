//! Shared-base parameterization of a sampled subnetwork: each of the `k`
//! active layers is a linear combination of all `L` layers' parameters, and
//! gradients are scattered back so every layer receives one (possibly zero)
//! gradient per step.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{arg_err, dim_err, Result};
use crate::netcore::{h_sqrt, unit_scales, BlockKind, Gradients, ResidualNet, ScalePattern};
use crate::subnet::GatePattern;

/// `k×L` combination coefficients plus a per-row scale applied to each
/// block's output-side tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct CoeffMatrix {
    c: Array2<f64>,
    row_scale: Array1<f64>,
}

impl CoeffMatrix {
    pub fn new(c: Array2<f64>) -> Result<Self> {
        if c.iter().any(|v| !v.is_finite()) {
            return arg_err("coefficients must be finite");
        }
        let k = c.nrows();
        Ok(Self {
            c,
            row_scale: Array1::ones(k),
        })
    }

    pub fn with_row_scale(mut self, scale: Array1<f64>) -> Result<Self> {
        if scale.len() != self.rows() {
            return dim_err(format!("{} row scales for {} rows", scale.len(), self.rows()));
        }
        self.row_scale = scale;
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.c.nrows()
    }

    pub fn depth(&self) -> usize {
        self.c.ncols()
    }

    pub fn coeffs(&self) -> ArrayView2<'_, f64> {
        self.c.view()
    }

    pub fn row_scale(&self) -> &Array1<f64> {
        &self.row_scale
    }

    /// Coefficients with each row multiplied by its scale.
    pub fn scaled(&self) -> Array2<f64> {
        let mut s = self.c.clone();
        for (mut row, &f) in s.rows_mut().into_iter().zip(self.row_scale.iter()) {
            row.mapv_inplace(|v| v * f);
        }
        s
    }

    pub fn nonzeros(&self) -> usize {
        self.c.iter().filter(|v| **v != 0.0).count()
    }

    /// Selected layers when every row is one-hot with increasing columns.
    pub fn active_layers(&self) -> Option<Vec<usize>> {
        let mut out = Vec::with_capacity(self.rows());
        for row in self.c.rows() {
            let nz: Vec<usize> = row.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(j, _)| j).collect();
            if nz.len() != 1 || row[nz[0]] != 1.0 {
                return None;
            }
            if out.last().is_some_and(|&p| p >= nz[0]) {
                return None;
            }
            out.push(nz[0]);
        }
        Some(out)
    }
}

/// One-hot rows selecting the active layers in order.
pub fn coeffs_for_gates(gates: &GatePattern) -> Result<CoeffMatrix> {
    let active = gates.active_indices();
    if active.is_empty() {
        return arg_err("gate pattern has no active layer");
    }
    let mut c = Array2::zeros((active.len(), gates.depth()));
    for (r, &j) in active.iter().enumerate() {
        c[[r, j]] = 1.0;
    }
    CoeffMatrix::new(c)
}

/// Like [`coeffs_for_gates`] with each row carrying its layer's scale.
pub fn coeffs_for_scaled_gates(gates: &GatePattern, scales: &ScalePattern) -> Result<CoeffMatrix> {
    if scales.len() != gates.depth() {
        return dim_err("scale pattern length differs from gate depth");
    }
    let base = coeffs_for_gates(gates)?;
    let rs = Array1::from_iter(gates.active_indices().iter().map(|&j| scales.0[j]));
    base.with_row_scale(rs)
}

fn check_same_shape(tensors: &[ArrayView2<f64>]) -> Result<()> {
    if let Some(first) = tensors.first() {
        if tensors.iter().any(|t| t.dim() != first.dim()) {
            return dim_err("layer tensors differ in shape");
        }
    }
    Ok(())
}

/// `shared[r] = Σ_j coeffs[r, j] · tensors[j]`
pub fn make_shared(tensors: &[ArrayView2<f64>], coeffs: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
    if tensors.len() != coeffs.ncols() || tensors.is_empty() {
        return dim_err(format!("{} layer tensors for {} coefficient columns", tensors.len(), coeffs.ncols()));
    }
    check_same_shape(tensors)?;
    let shape = tensors[0].raw_dim();
    Ok(coeffs
        .rows()
        .into_iter()
        .map(|row| {
            let mut acc = Array2::zeros(shape);
            for (j, &cj) in row.iter().enumerate() {
                if cj != 0.0 {
                    acc.scaled_add(cj, &tensors[j]);
                }
            }
            acc
        })
        .collect())
}

/// `grad[j] = Σ_r coeffs[r, j] · shared_grads[r]`; layers with an all-zero
/// column get exact zeros.
pub fn scatter_grads(coeffs: ArrayView2<f64>, shared_grads: &[ArrayView2<f64>]) -> Result<Vec<Array2<f64>>> {
    if shared_grads.len() != coeffs.nrows() || shared_grads.is_empty() {
        return dim_err(format!("{} shared gradients for {} coefficient rows", shared_grads.len(), coeffs.nrows()));
    }
    check_same_shape(shared_grads)?;
    let shape = shared_grads[0].raw_dim();
    Ok(coeffs
        .columns()
        .into_iter()
        .map(|col| {
            let mut acc = Array2::zeros(shape);
            for (r, &cr) in col.iter().enumerate() {
                if cr != 0.0 {
                    acc.scaled_add(cr, &shared_grads[r]);
                }
            }
            acc
        })
        .collect())
}

/// Index of the tensor a block's output is linear in.
fn output_tensor(block: &BlockKind) -> usize {
    match block {
        BlockKind::ReluMlp { .. } => 1,
        BlockKind::Linear { .. } | BlockKind::LinearLn { .. } => 0,
    }
}

fn same_variant(a: &BlockKind, b: &BlockKind) -> bool {
    match (a, b) {
        (BlockKind::ReluMlp { prenorm: p, .. }, BlockKind::ReluMlp { prenorm: q, .. }) => p == q,
        (BlockKind::Linear { .. }, BlockKind::Linear { .. }) | (BlockKind::LinearLn { .. }, BlockKind::LinearLn { .. }) => true,
        _ => false,
    }
}

fn tensor_coeffs(coeffs: &CoeffMatrix, template: &BlockKind) -> Vec<Array2<f64>> {
    let n = template.params().len();
    let out = output_tensor(template);
    (0..n).map(|i| if i == out { coeffs.scaled() } else { coeffs.coeffs().to_owned() }).collect()
}

/// The `k` shared blocks built from all `L` blocks.
pub fn shared_blocks(blocks: &[BlockKind], coeffs: &CoeffMatrix) -> Result<Vec<BlockKind>> {
    let template = blocks.first().ok_or_else(|| crate::LabError::Argument("no blocks".into()))?;
    if blocks.iter().any(|b| !same_variant(b, template)) {
        return arg_err("shared-base combination needs blocks of one kind");
    }
    if coeffs.depth() != blocks.len() {
        return dim_err(format!("{} coefficient columns for {} blocks", coeffs.depth(), blocks.len()));
    }
    let per_tensor = tensor_coeffs(coeffs, template);
    let views: Vec<Vec<ArrayView2<f64>>> = blocks.iter().map(|b| b.params()).collect();
    let mut combined = vec![];
    for (i, c) in per_tensor.iter().enumerate() {
        let layer_tensors: Vec<ArrayView2<f64>> = views.iter().map(|v| v[i]).collect();
        combined.push(make_shared(&layer_tensors, c.view())?);
    }
    Ok((0..coeffs.rows())
        .map(|r| {
            let mut b = template.clone();
            for (i, mut p) in b.params_mut().into_iter().enumerate() {
                p.assign(&combined[i][r]);
            }
            b
        })
        .collect())
}

/// Per-layer gradients of all `L` blocks from the `k` shared-block gradients.
pub fn scatter_block_grads(blocks: &[BlockKind], coeffs: &CoeffMatrix, shared: &[Vec<Array2<f64>>]) -> Result<Vec<Vec<Array2<f64>>>> {
    let template = blocks.first().ok_or_else(|| crate::LabError::Argument("no blocks".into()))?;
    let per_tensor = tensor_coeffs(coeffs, template);
    let mut out: Vec<Vec<Array2<f64>>> = vec![Vec::with_capacity(per_tensor.len()); blocks.len()];
    for (i, c) in per_tensor.iter().enumerate() {
        let grads: Vec<ArrayView2<f64>> = shared.iter().map(|g| g[i].view()).collect();
        for (j, g) in scatter_grads(c.view(), &grads)?.into_iter().enumerate() {
            out[j].push(g);
        }
    }
    Ok(out)
}

/// The `k`-block network whose blocks are the shared combinations.
pub fn shared_network(net: &ResidualNet, coeffs: &CoeffMatrix) -> Result<ResidualNet> {
    net.with_blocks(shared_blocks(net.blocks(), coeffs)?)
}

/// Gradients of `½·mean‖F(x)‖²` through the gated network.
fn gated_grads(net: &ResidualNet, x: ArrayView2<f64>, scales: &ScalePattern) -> Result<Gradients> {
    let tape = net.forward(x, scales)?;
    let n = x.nrows() as f64;
    let up = &tape.output / n;
    net.backward(&tape, up.view())
}

/// The same gradients computed through the shared-base network and
/// scattered back to all layers.
fn shared_grads(net: &ResidualNet, x: ArrayView2<f64>, coeffs: &CoeffMatrix) -> Result<Gradients> {
    let shared = shared_network(net, coeffs)?;
    let g = gated_grads(&shared, x, &ScalePattern::ones(shared.depth()))?;
    Ok(Gradients {
        blocks: scatter_block_grads(net.blocks(), coeffs, &g.blocks)?,
        head: g.head,
        input: g.input,
    })
}

fn rel_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let scale = a.iter().chain(b.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    a.iter().zip(b.iter()).fold(0.0f64, |m, (p, q)| m.max((p - q).abs())) / scale
}

fn grads_discrepancy(a: &Gradients, b: &Gradients) -> f64 {
    let blocks = a.blocks.iter().flatten().zip(b.blocks.iter().flatten());
    let head = a.head.iter().zip(b.head.iter());
    blocks
        .chain(head)
        .chain(std::iter::once((&a.input, &b.input)))
        .fold(0.0f64, |m, (p, q)| m.max(rel_diff(p, q)))
}

/// Largest relative gradient difference between the gated path and the
/// shared-base path, with unit layer scales.
pub fn equivalence_check(net: &ResidualNet, x: ArrayView2<f64>, gates: &GatePattern) -> Result<f64> {
    let scales = unit_scales(gates);
    let gated = gated_grads(net, x, &scales)?;
    let shared = shared_grads(net, x, &coeffs_for_gates(gates)?)?;
    Ok(grads_discrepancy(&gated, &shared))
}

/// As [`equivalence_check`] with square-root scales folded into the rows.
pub fn equivalence_check_scaled(net: &ResidualNet, x: ArrayView2<f64>, gates: &GatePattern) -> Result<f64> {
    let scales = h_sqrt(gates)?;
    let gated = gated_grads(net, x, &scales)?;
    let shared = shared_grads(net, x, &coeffs_for_scaled_gates(gates, &scales)?)?;
    Ok(grads_discrepancy(&gated, &shared))
}

fn sgd_apply(net: &ResidualNet, grads: &Gradients, lr: f64) -> ResidualNet {
    let mut out = net.clone();
    for (b, g) in out.blocks_mut().iter_mut().zip(grads.blocks.iter()) {
        for (mut p, gi) in b.params_mut().into_iter().zip(g.iter()) {
            p.scaled_add(-lr, gi);
        }
    }
    for (mut p, gi) in out.head_mut().params_mut().into_iter().zip(grads.head.iter()) {
        p.scaled_add(-lr, gi);
    }
    out
}

/// One SGD step through each path; returns the largest relative parameter
/// difference afterwards.
pub fn sgd_step_equivalence(net: &ResidualNet, x: ArrayView2<f64>, gates: &GatePattern, lr: f64, scaled: bool) -> Result<f64> {
    let (scales, coeffs) = if scaled {
        let s = h_sqrt(gates)?;
        let c = coeffs_for_scaled_gates(gates, &s)?;
        (s, c)
    } else {
        (unit_scales(gates), coeffs_for_gates(gates)?)
    };
    let a = sgd_apply(net, &gated_grads(net, x, &scales)?, lr);
    let b = sgd_apply(net, &shared_grads(net, x, &coeffs)?, lr);
    let mut worst = 0.0f64;
    for (ba, bb) in a.blocks().iter().zip(b.blocks().iter()) {
        for (p, q) in ba.params().iter().zip(bb.params().iter()) {
            worst = worst.max(rel_diff(&p.to_owned(), &q.to_owned()));
        }
    }
    for (p, q) in a.head().params().iter().zip(b.head().params().iter()) {
        worst = worst.max(rel_diff(&p.to_owned(), &q.to_owned()));
    }
    Ok(worst)
}

/// Cost of a shared-base step relative to a static `k`-layer subnetwork:
/// `1 + 2L/(2B + 1)` for `B` tokens per step.
pub fn flops_overhead(batch: usize, depth: usize) -> f64 {
    1.0 + 2.0 * depth as f64 / (2.0 * batch as f64 + 1.0)
}

/// Block-sparse template: `k` shared layers split evenly over `n_groups`
/// groups, each combining only its own group's layers (uniform weights).
pub fn grouped_coeffs(depth: usize, k: usize, n_groups: usize) -> Result<CoeffMatrix> {
    if n_groups == 0 || depth % n_groups != 0 || k % n_groups != 0 || k == 0 || k > depth {
        return arg_err(format!("cannot split {k} of {depth} layers into {n_groups} groups"));
    }
    let group = depth / n_groups;
    let per = k / n_groups;
    let mut c = Array2::zeros((k, depth));
    for r in 0..k {
        let g = r / per;
        for j in g * group..(g + 1) * group {
            c[[r, j]] = 1.0 / group as f64;
        }
    }
    CoeffMatrix::new(c)
}

/// Multiply-adds for one training step of `k` active `d×d` linear layers
/// with a batch of `batch` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MacCount {
    /// Forward, input gradient, weight gradient and update of the static
    /// subnetwork.
    pub static_step: u64,
    /// `make_shared` plus `scatter_grads` with dense coefficients.
    pub combination: u64,
}

impl MacCount {
    pub fn ratio(&self) -> f64 {
        (self.static_step + self.combination) as f64 / self.static_step as f64
    }
}

pub fn linear_step_macs(batch: usize, d: usize, depth: usize, k: usize) -> MacCount {
    let dd = (d * d) as u64;
    let (b, l, k) = (batch as u64, depth as u64, k as u64);
    let forward = b * dd;
    let input_grad = b * dd;
    let weight_grad = b * dd;
    let update = dd;
    MacCount {
        static_step: k * (forward + input_grad + weight_grad + update),
        // k rows over L columns to combine, L columns over k rows to scatter
        combination: k * l * dd + l * k * dd,
    }
}

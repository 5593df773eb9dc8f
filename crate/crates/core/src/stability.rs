//! Drop-one stability probes: how far the output moves when one layer is
//! skipped, how state norms grow with depth, and how the loss of the full
//! model compares with the average loss of its drop-one subnetworks.
//!
//! Distances are measured on the final state `y^(L)` (the head input).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, LabError, Result};
use crate::netcore::{BlockKind, Composition, Head, ResidualNet, ScalePattern};
use crate::numkit::{gauss_matrix, random_orthogonal, row_norms, spectral_norm, sphere_samples, RngStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityProfile {
    /// Mean `‖y^(ℓ)‖` over probes for `ℓ = 1..=L`.
    pub norms: Vec<f64>,
    /// Mean `Ψ_ℓ` over probes for `ℓ = 1..=L`.
    pub psi: Vec<f64>,
    pub output_norm_mean: f64,
    pub output_norm_std: f64,
    pub probes: usize,
}

/// Per-probe state norms: row `ℓ` holds `‖y^(ℓ)‖` for `ℓ = 0..=L`.
pub fn norm_profile(net: &ResidualNet, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let tape = net.forward(x, &ScalePattern::ones(net.depth()))?;
    let mut out = Array2::zeros((net.depth() + 1, x.nrows()));
    for (l, state) in tape.states.iter().enumerate() {
        out.row_mut(l).assign(&row_norms(state.view()));
    }
    Ok(out)
}

/// `‖F_{−ℓ}(x) − F(x)‖` for every layer (rows) and probe (columns), plus
/// the full-model final states.
pub fn psi_matrix(net: &ResidualNet, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    let depth = net.depth();
    let ones = ScalePattern::ones(depth);
    let tape = net.forward(x, &ones)?;
    let full = tape.last_state().clone();
    let mut psi = Array2::zeros((depth, x.nrows()));
    for l in 0..depth {
        // skipping block l continues from its input state
        let dropped = net.forward_tail(l + 1, tape.states[l].view(), &ones)?;
        psi.row_mut(l).assign(&row_norms((&dropped - &full).view()));
    }
    Ok((psi, full))
}

pub fn psi_profile(net: &ResidualNet, probes: ArrayView2<f64>) -> Result<StabilityProfile> {
    if probes.nrows() == 0 {
        return arg_err("need at least one probe input");
    }
    let norms = norm_profile(net, probes)?;
    let (psi, full) = psi_matrix(net, probes)?;
    let out_norms = row_norms(full.view());
    let n = out_norms.len() as f64;
    let mean = out_norms.sum() / n;
    let var = out_norms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(StabilityProfile {
        norms: norms.mean_axis(Axis(1)).expect("probes").to_vec()[1..].to_vec(),
        psi: psi.mean_axis(Axis(1)).expect("probes").to_vec(),
        output_norm_mean: mean,
        output_norm_std: var.sqrt(),
        probes: probes.nrows(),
    })
}

/// Per-sample loss on head outputs.
#[derive(Clone, Copy, Debug)]
pub enum HeadLoss<'a> {
    /// `(out − target)²` on a scalar output.
    Squared { targets: ArrayView1<'a, f64> },
    /// `‖out − reference‖₂`.
    Distill { reference: ArrayView2<'a, f64> },
}

impl HeadLoss<'_> {
    pub fn per_sample(&self, out: ArrayView2<f64>) -> Result<Array1<f64>> {
        match self {
            HeadLoss::Squared { targets } => {
                if out.ncols() != 1 || out.nrows() != targets.len() {
                    return arg_err("squared loss needs one scalar output per target");
                }
                Ok(Array1::from_iter(out.column(0).iter().zip(targets.iter()).map(|(p, t)| (p - t) * (p - t))))
            }
            HeadLoss::Distill { reference } => {
                if out.dim() != reference.dim() {
                    return arg_err("distillation reference shape mismatch");
                }
                Ok(row_norms((&out - reference).view()))
            }
        }
    }

    /// Gradient of each sample's loss with respect to its output row
    /// (zero where the distillation loss is exactly zero).
    pub fn grad(&self, out: ArrayView2<f64>) -> Result<Array2<f64>> {
        match self {
            HeadLoss::Squared { targets } => {
                let mut g = out.to_owned();
                for (mut row, t) in g.axis_iter_mut(Axis(0)).zip(targets.iter()) {
                    row[0] = 2.0 * (row[0] - t);
                }
                Ok(g)
            }
            HeadLoss::Distill { reference } => {
                let mut g = &out - reference;
                for mut row in g.axis_iter_mut(Axis(0)) {
                    let n = row.dot(&row).sqrt();
                    if n > 0.0 {
                        row /= n;
                    }
                }
                Ok(g)
            }
        }
    }
}

fn mean_and_stderr(v: &Array1<f64>) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.sum() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossGap {
    pub loss_full: f64,
    pub loss_dropone: f64,
    /// `loss_full − loss_dropone`
    pub gap: f64,
    /// Standard error of `gap` over the evaluation samples.
    pub stderr: f64,
}

/// Full-model loss against the mean loss of the `L` drop-one subnetworks.
pub fn loss_gap(net: &ResidualNet, x: ArrayView2<f64>, loss: &HeadLoss) -> Result<LossGap> {
    let depth = net.depth();
    let ones = ScalePattern::ones(depth);
    let tape = net.forward(x, &ones)?;
    let full = loss.per_sample(tape.output.view())?;
    let mut dropped = Array1::<f64>::zeros(x.nrows());
    for l in 0..depth {
        let y = net.forward_tail(l + 1, tape.states[l].view(), &ones)?;
        dropped += &loss.per_sample(net.head().apply(y.view()).view())?;
    }
    dropped /= depth as f64;
    let per_sample_gap = &full - &dropped;
    let (gap, stderr) = mean_and_stderr(&per_sample_gap);
    Ok(LossGap {
        loss_full: full.mean().expect("samples"),
        loss_dropone: dropped.mean().expect("samples"),
        gap,
        stderr,
    })
}

/// `(μ/L)·E[Σ_ℓ Ψ_ℓ(x)/‖F(x)‖]` with its Monte-Carlo standard error.
pub fn bound_rhs(net: &ResidualNet, x: ArrayView2<f64>, mu: f64) -> Result<(f64, f64)> {
    if !(mu > 0.0) {
        return arg_err("mu must be positive");
    }
    let (psi, full) = psi_matrix(net, x)?;
    let norms = row_norms(full.view());
    if norms.iter().any(|&n| n == 0.0) {
        return arg_err("zero network output: the bound is undefined");
    }
    let per_sample = psi.sum_axis(Axis(0)) / &norms * (mu / net.depth() as f64);
    Ok(mean_and_stderr(&per_sample))
}

/// Largest observed `(L(z+η) − L(z))·‖z‖/‖η‖` over perturbations of the
/// head inputs `z`. Directions: the loss gradient (both signs), `n_perturb`
/// random directions, and `n_perturb` random directions tilted towards
/// `−z`; each is tried at every relative radius `‖η‖/‖z‖` in the grid.
pub fn estimate_mu(
    head: &Head,
    loss: &HeadLoss,
    z: ArrayView2<f64>,
    n_perturb: usize,
    radius_grid: &[f64],
    rng: &mut RngStream,
) -> Result<f64> {
    if radius_grid.is_empty() || radius_grid.iter().any(|&r| !(r > 0.0)) {
        return arg_err("radius grid must be nonempty and positive");
    }
    let (n, d) = z.dim();
    let base = loss.per_sample(head.apply(z).view())?;
    let norms = row_norms(z);
    if norms.iter().any(|&v| v == 0.0) {
        return arg_err("zero head input");
    }
    let unit = |m: Array2<f64>| {
        let mut m = m;
        for mut row in m.axis_iter_mut(Axis(0)) {
            let r = row.dot(&row).sqrt();
            if r > 0.0 {
                row /= r;
            }
        }
        m
    };
    let mut directions = Vec::new();
    let out_grad = loss.grad(head.apply(z).view())?;
    let (_, zgrad) = head.backward(z, out_grad.view());
    let g = unit(zgrad);
    if g.iter().any(|&v| v != 0.0) {
        directions.push(-&g);
        directions.push(g);
    }
    let mut zhat = z.to_owned();
    for (mut row, &nr) in zhat.axis_iter_mut(Axis(0)).zip(norms.iter()) {
        row /= nr;
    }
    for _ in 0..n_perturb {
        directions.push(unit(gauss_matrix(n, d, 1.0, rng)?));
        let tilt = unit(gauss_matrix(n, d, 1.0, rng)?) * 0.1 - &zhat;
        directions.push(unit(tilt));
    }
    let mut best = f64::NEG_INFINITY;
    for dir in &directions {
        for &r in radius_grid {
            let mut eta = dir.clone();
            for (mut row, &nr) in eta.axis_iter_mut(Axis(0)).zip(norms.iter()) {
                row *= r * nr;
            }
            let moved = &z + &eta;
            let l = loss.per_sample(head.apply(moved.view()).view())?;
            for (li, bi) in l.iter().zip(base.iter()) {
                let ratio = (li - bi) / r;
                if ratio.is_finite() {
                    best = best.max(ratio);
                }
            }
        }
    }
    Ok(best.max(0.0))
}

/// Ordinary least-squares slope of `log y` against `log x`.
pub fn fit_scaling_exponent(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return arg_err("need at least three paired points");
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return arg_err("log-log fit needs positive values");
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return arg_err("x values must not all be equal");
    }
    Ok(sxy / sxx)
}

/// The matrix shared by all layers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SharedMatrix {
    /// Symmetric, top eigenvalue 1, second `1 − gap`, the rest uniform in
    /// `[−(1 − gap), 1 − gap]`.
    Gapped { gap: f64 },
    /// Skew-symmetric with spectral norm 1.
    Skew,
}

/// The shared matrix and, for the gapped kind, its top eigenvector.
pub fn shared_matrix(kind: SharedMatrix, d: usize, rng: &mut RngStream) -> Result<(Array2<f64>, Option<Array1<f64>>)> {
    match kind {
        SharedMatrix::Gapped { gap } => {
            if !(gap > 0.0 && gap < 1.0) || d < 2 {
                return arg_err("gapped matrix needs 0 < gap < 1 and d >= 2");
            }
            let q = random_orthogonal(d, rng)?;
            let mut lam = Array1::zeros(d);
            lam[0] = 1.0;
            lam[1] = 1.0 - gap;
            for i in 2..d {
                lam[i] = (1.0 - gap) * (2.0 * rng.uniform() - 1.0);
            }
            let a = (&q * &lam).dot(&q.t());
            Ok((a, Some(q.column(0).to_owned())))
        }
        SharedMatrix::Skew => {
            let g = gauss_matrix(d, d, 1.0, rng)?;
            let s = &g - &g.t();
            let norm = spectral_norm(s.view(), 500);
            Ok((s / norm, None))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearNetConfig {
    pub depth: usize,
    pub d: usize,
    pub residual: bool,
    pub layernorm: bool,
    /// Weight on the shared matrix: `W_ℓ = √τ A + √(1−τ) G_ℓ`.
    pub tau: f64,
    pub shared: SharedMatrix,
    /// Entry std of the random parts; `1/√d` when absent.
    #[serde(default)]
    pub random_std: Option<f64>,
}

impl LinearNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.d == 0 {
            return arg_err("depth and width must be positive");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return arg_err(format!("tau {} outside [0, 1]", self.tau));
        }
        Ok(())
    }

    /// Whether `d ≥ probes·L·ln(1/fail)` holds (the random-regime width
    /// requirement, up to its constant).
    pub fn width_sufficient(&self, probes: usize, fail_prob: f64) -> bool {
        self.d as f64 >= probes as f64 * self.depth as f64 * (1.0 / fail_prob).ln()
    }
}

/// Builds the linear network with a `NormalizedLinear` identity head; also
/// returns the shared matrix's top eigenvector when known.
pub fn build_linear_net(cfg: &LinearNetConfig, rng: &mut RngStream) -> Result<(ResidualNet, Option<Array1<f64>>)> {
    cfg.validate()?;
    let d = cfg.d;
    let (a, top) = shared_matrix(cfg.shared, d, rng)?;
    let std = cfg.random_std.unwrap_or(1.0 / (d as f64).sqrt());
    let mut blocks = Vec::with_capacity(cfg.depth);
    for _ in 0..cfg.depth {
        let mut w = &a * cfg.tau.sqrt();
        if cfg.tau < 1.0 {
            w.scaled_add((1.0 - cfg.tau).sqrt(), &gauss_matrix(d, d, std, rng)?);
        }
        blocks.push(if cfg.layernorm { BlockKind::LinearLn { w } } else { BlockKind::Linear { w } });
    }
    let composition = if cfg.residual { Composition::Residual } else { Composition::Plain };
    let head = Head::NormalizedLinear { v: Array2::eye(d) };
    Ok((ResidualNet::new(blocks, composition, head)?, top))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearExperiment {
    pub profile: StabilityProfile,
    pub gap: LossGap,
    pub mu: f64,
    pub bound: f64,
    pub bound_stderr: f64,
}

/// Relative radii used by [`linear_net_experiment`].
pub const MU_RADII: [f64; 8] = [1e-4, 1e-3, 1e-2, 1e-1, 0.5, 0.9, 1.0, 1.5];

/// Builds the configured network, probes it on sphere samples, and
/// evaluates the drop-one gap under self-distillation: the loss of an
/// output is its distance to the full model's normalized output.
pub fn linear_net_experiment(cfg: &LinearNetConfig, probe_count: usize, rng: &mut RngStream) -> Result<LinearExperiment> {
    let (net, _) = build_linear_net(cfg, rng)?;
    let x = sphere_samples(probe_count, cfg.d, rng)?;
    let profile = psi_profile(&net, x.view())?;
    let tape = net.forward(x.view(), &ScalePattern::ones(net.depth()))?;
    let reference = tape.output.clone();
    let loss = HeadLoss::Distill {
        reference: reference.view(),
    };
    let gap = loss_gap(&net, x.view(), &loss)?;
    let mu = estimate_mu(net.head(), &loss, tape.last_state().view(), 4, &MU_RADII, rng)?;
    let (bound, bound_stderr) = bound_rhs(&net, x.view(), mu.max(f64::MIN_POSITIVE))?;
    Ok(LinearExperiment {
        profile,
        gap,
        mu,
        bound,
        bound_stderr,
    })
}

/// Angle (radians, in `[0, π/2]`) between each state and the line spanned
/// by `v`; rows are layers `0..=L`, columns probes.
pub fn alignment_profile(net: &ResidualNet, x: ArrayView2<f64>, v: ArrayView1<f64>) -> Result<Array2<f64>> {
    let tape = net.forward(x, &ScalePattern::ones(net.depth()))?;
    let vn = v.dot(&v).sqrt();
    let mut out = Array2::zeros((tape.states.len(), x.nrows()));
    for (l, s) in tape.states.iter().enumerate() {
        for (i, row) in s.axis_iter(Axis(0)).enumerate() {
            let c = (row.dot(&v) / (row.dot(&row).sqrt() * vn)).abs().min(1.0);
            out[[l, i]] = c.acos();
        }
    }
    Ok(out)
}

/// Errors if any probe state is not finite.
pub fn check_finite(m: &Array2<f64>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LabError::NonFinite { layer: 0 })
    }
}

//! Two-layer sine residual network trained with exact population gradients
//! over the boolean cube:
//!
//! ```text
//! y1 = p0 + sin(⟨w1, x⟩ + b1)
//! y2 = y1 + sin(⟨w2, x⟩ + y1 + b2)
//! ```
//!
//! Training runs in three phases: the output bias alone, then one randomly
//! chosen single-layer subnetwork per step, then the second layer of the
//! full network with the first frozen.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, LabError, Result};
use crate::numkit::RngStream;

/// Largest input dimension handled by exact enumeration.
pub const MAX_SINE_DIM: usize = 14;

/// Target `constant + x1_coeff·x1 + x1x2_coeff·x1·x2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SineTarget {
    pub constant: f64,
    pub x1: f64,
    pub x1x2: f64,
}

impl SineTarget {
    /// `√3/2 + (√3/2)·x1 − x1·x2`
    pub fn standard() -> Self {
        let h = 3f64.sqrt() / 2.0;
        Self {
            constant: h,
            x1: h,
            x1x2: -1.0,
        }
    }

    pub fn zero() -> Self {
        Self {
            constant: 0.0,
            x1: 0.0,
            x1x2: 0.0,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.x1 * x[0] + self.x1x2 * x[0] * x[1]
    }
}

pub fn target_fstar(x: &[f64]) -> f64 {
    SineTarget::standard().eval(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SineNetParams {
    pub p0: f64,
    pub w1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b1: f64,
    pub b2: f64,
    /// Also add `p0` inside the second sine.
    #[serde(default)]
    pub extra_p0: bool,
}

impl SineNetParams {
    pub fn zeros(d: usize) -> Self {
        Self {
            p0: 0.0,
            w1: Array1::zeros(d),
            w2: Array1::zeros(d),
            b1: 0.0,
            b2: 0.0,
            extra_p0: false,
        }
    }

    pub fn d(&self) -> usize {
        self.w1.len()
    }

    fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.p0, self.b1, self.b2];
        v.extend(self.w1.iter());
        v.extend(self.w2.iter());
        v
    }

    fn from_vec(&self, v: &[f64]) -> Self {
        let d = self.d();
        Self {
            p0: v[0],
            b1: v[1],
            b2: v[2],
            w1: Array1::from(v[3..3 + d].to_vec()),
            w2: Array1::from(v[3 + d..3 + 2 * d].to_vec()),
            extra_p0: self.extra_p0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SinePhase {
    BiasOnly,
    /// Single-layer subnetwork of the given layer (0 or 1).
    Phase1(usize),
    Phase2,
}

impl SinePhase {
    pub fn label(&self) -> &'static str {
        match self {
            SinePhase::BiasOnly => "bias",
            SinePhase::Phase1(_) => "phase1",
            SinePhase::Phase2 => "phase2",
        }
    }
}

/// All of `{−1, +1}^d` as rows.
#[derive(Clone, Debug)]
pub struct Cube {
    pub x: Array2<f64>,
}

impl Cube {
    pub fn new(d: usize) -> Result<Self> {
        if d < 2 || d > MAX_SINE_DIM {
            return arg_err(format!("sine lab needs 2 <= d <= {MAX_SINE_DIM}, got {d}"));
        }
        let n = 1usize << d;
        let x = Array2::from_shape_fn((n, d), |(r, j)| if (r >> j) & 1 == 1 { -1.0 } else { 1.0 });
        Ok(Self { x })
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn targets(&self, target: &SineTarget) -> Array1<f64> {
        self.x.map_axis(Axis(1), |r| target.eval(r.as_slice().expect("contiguous")))
    }
}

/// Population gradient over all parameters (zeros for those the phase
/// does not train).
#[derive(Clone, Debug, PartialEq)]
pub struct SineGrad {
    pub p0: f64,
    pub w1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b1: f64,
    pub b2: f64,
}

impl SineGrad {
    fn zeros(d: usize) -> Self {
        Self {
            p0: 0.0,
            w1: Array1::zeros(d),
            w2: Array1::zeros(d),
            b1: 0.0,
            b2: 0.0,
        }
    }

    fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.p0, self.b1, self.b2];
        v.extend(self.w1.iter());
        v.extend(self.w2.iter());
        v
    }
}

/// Outputs on every cube point of the model trained in `phase`.
pub fn phase_outputs(params: &SineNetParams, phase: SinePhase, cube: &Cube) -> Array1<f64> {
    match phase {
        SinePhase::BiasOnly => Array1::from_elem(cube.x.nrows(), params.p0),
        SinePhase::Phase1(layer) => {
            let (w, b) = if layer == 0 { (&params.w1, params.b1) } else { (&params.w2, params.b2) };
            (cube.x.dot(w) + b).mapv(|z| params.p0 + z.sin())
        }
        SinePhase::Phase2 => full_outputs(params, cube),
    }
}

/// Two-layer network outputs on every cube point.
pub fn full_outputs(params: &SineNetParams, cube: &Cube) -> Array1<f64> {
    let y1 = (cube.x.dot(&params.w1) + params.b1).mapv(|z| params.p0 + z.sin());
    let shift = params.b2 + if params.extra_p0 { params.p0 } else { 0.0 };
    let z2 = cube.x.dot(&params.w2) + &y1 + shift;
    &y1 + &z2.mapv(f64::sin)
}

fn mse(out: &Array1<f64>, y: &Array1<f64>) -> f64 {
    (out - y).mapv(|r| r * r).mean().expect("nonempty cube")
}

pub fn population_loss(params: &SineNetParams, phase: SinePhase, cube: &Cube, target: &SineTarget) -> f64 {
    mse(&phase_outputs(params, phase, cube), &cube.targets(target))
}

/// Exact gradient of the phase objective with respect to the parameters
/// that phase trains.
pub fn population_grad(params: &SineNetParams, phase: SinePhase, cube: &Cube, target: &SineTarget) -> Result<SineGrad> {
    let d = cube.d();
    if params.d() != d {
        return arg_err("parameter dimension does not match the cube");
    }
    let y = cube.targets(target);
    let n = y.len() as f64;
    let mut g = SineGrad::zeros(d);
    match phase {
        SinePhase::BiasOnly => g.p0 = 2.0 * (params.p0 - y.mean().expect("nonempty")),
        SinePhase::Phase1(layer) => {
            if layer > 1 {
                return arg_err("layer must be 0 or 1");
            }
            let (w, b) = if layer == 0 { (&params.w1, params.b1) } else { (&params.w2, params.b2) };
            let z = cube.x.dot(w) + b;
            let r = z.mapv(|z| params.p0 + z.sin()) - &y;
            let coef = 2.0 * &r * &z.mapv(f64::cos);
            let gw = cube.x.t().dot(&coef) / n;
            let gb = coef.sum() / n;
            if layer == 0 {
                g.w1 = gw;
                g.b1 = gb;
            } else {
                g.w2 = gw;
                g.b2 = gb;
            }
        }
        SinePhase::Phase2 => {
            let (_, coef) = second_layer_residual(params, cube, &y);
            g.w2 = cube.x.t().dot(&coef) / n;
            g.b2 = coef.sum() / n;
        }
    }
    Ok(g)
}

fn second_layer_residual(params: &SineNetParams, cube: &Cube, y: &Array1<f64>) -> (Array1<f64>, Array1<f64>) {
    let z1 = cube.x.dot(&params.w1) + params.b1;
    let y1 = z1.mapv(|z| params.p0 + z.sin());
    let shift = params.b2 + if params.extra_p0 { params.p0 } else { 0.0 };
    let z2 = cube.x.dot(&params.w2) + &y1 + shift;
    let r = &y1 + &z2.mapv(f64::sin) - y;
    let coef = 2.0 * &r * &z2.mapv(f64::cos);
    (z1, coef)
}

/// Exact gradient of the full two-layer loss with respect to every
/// parameter.
pub fn full_grad(params: &SineNetParams, cube: &Cube, target: &SineTarget) -> SineGrad {
    let y = cube.targets(target);
    let n = y.len() as f64;
    let z1 = cube.x.dot(&params.w1) + params.b1;
    let y1 = z1.mapv(|z| params.p0 + z.sin());
    let shift = params.b2 + if params.extra_p0 { params.p0 } else { 0.0 };
    let z2 = cube.x.dot(&params.w2) + &y1 + shift;
    let r = &y1 + &z2.mapv(f64::sin) - &y;
    let dz2 = 2.0 * &r * &z2.mapv(f64::cos);
    // y1 feeds the output directly and through z2
    let dy1 = 2.0 * &r + &dz2;
    let dz1 = &dy1 * &z1.mapv(f64::cos);
    let extra = if params.extra_p0 { dz2.sum() } else { 0.0 };
    SineGrad {
        p0: (dy1.sum() + extra) / n,
        w1: cube.x.t().dot(&dz1) / n,
        b1: dz1.sum() / n,
        w2: cube.x.t().dot(&dz2) / n,
        b2: dz2.sum() / n,
    }
}

/// Central-difference check of [`full_grad`] and of [`population_grad`]
/// for `phase`; returns the largest absolute discrepancy.
pub fn gradient_discrepancy(params: &SineNetParams, phase: Option<SinePhase>, cube: &Cube, target: &SineTarget, h: f64) -> Result<f64> {
    let base = params.to_vec();
    let analytic = match phase {
        Some(p) => population_grad(params, p, cube, target)?.to_vec(),
        None => full_grad(params, cube, target).to_vec(),
    };
    let objective = |v: &[f64]| {
        let p = params.from_vec(v);
        match phase {
            Some(ph) => population_loss(&p, ph, cube, target),
            None => mse(&full_outputs(&p, cube), &cube.targets(target)),
        }
    };
    let trained = trained_mask(phase, params.d());
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut up = base.clone();
        up[i] += h;
        let mut down = base.clone();
        down[i] -= h;
        let fd = if trained[i] { (objective(&up) - objective(&down)) / (2.0 * h) } else { 0.0 };
        worst = worst.max((fd - analytic[i]).abs());
    }
    Ok(worst)
}

fn trained_mask(phase: Option<SinePhase>, d: usize) -> Vec<bool> {
    // layout: p0, b1, b2, w1.., w2..
    let mut m = vec![false; 3 + 2 * d];
    match phase {
        None => m.iter_mut().for_each(|b| *b = true),
        Some(SinePhase::BiasOnly) => m[0] = true,
        Some(SinePhase::Phase1(0)) => {
            m[1] = true;
            m[3..3 + d].iter_mut().for_each(|b| *b = true);
        }
        Some(SinePhase::Phase1(_)) | Some(SinePhase::Phase2) => {
            m[2] = true;
            m[3 + d..].iter_mut().for_each(|b| *b = true);
        }
    }
    m
}

/// Exact projections onto `x1`, `x1·x2` and the constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SineCoeffs {
    pub x1: f64,
    pub x1x2: f64,
    pub constant: f64,
}

pub fn extract_coeffs(values: &Array1<f64>, cube: &Cube) -> Result<SineCoeffs> {
    if values.len() != cube.x.nrows() {
        return arg_err("one value per cube point required");
    }
    let x1 = cube.x.column(0);
    let x2 = cube.x.column(1);
    let n = values.len() as f64;
    Ok(SineCoeffs {
        x1: values.dot(&x1) / n,
        x1x2: (values * &x1 * &x2).sum() / n,
        constant: values.sum() / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhasePlan {
    pub steps_bias: usize,
    pub steps_phase1: usize,
    pub steps_phase2: usize,
    pub eta: f64,
}

impl Default for PhasePlan {
    fn default() -> Self {
        Self {
            steps_bias: 5000,
            steps_phase1: 5000,
            steps_phase2: 5000,
            eta: 1e-3,
        }
    }
}

impl PhasePlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1e-2) {
            return arg_err(format!("learning rate {} outside (0, 1e-2]", self.eta));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub phase: String,
    pub p0: f64,
    pub w11: f64,
    pub w21: f64,
    pub w22: f64,
    pub b1: f64,
    pub b2: f64,
    /// Objective of the phase in progress.
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThreePhaseResult {
    pub trajectory: Vec<TrajectoryRow>,
    pub after_bias: SineNetParams,
    pub after_phase1: SineNetParams,
    pub final_params: SineNetParams,
    /// Full two-layer population loss at the end.
    pub final_loss: f64,
    /// Whether each phase objective never increased (per phase).
    pub monotone: [bool; 3],
    /// First step at which the current model's `x1` coefficient reached
    /// 90% of the target's.
    pub x1_reached: Option<usize>,
    /// Same for the `x1·x2` coefficient.
    pub x1x2_reached: Option<usize>,
    /// Largest gradient finite-difference discrepancy seen at record points.
    pub max_grad_discrepancy: f64,
}

fn apply(params: &mut SineNetParams, g: &SineGrad, eta: f64) {
    params.p0 -= eta * g.p0;
    params.b1 -= eta * g.b1;
    params.b2 -= eta * g.b2;
    params.w1.scaled_add(-eta, &g.w1);
    params.w2.scaled_add(-eta, &g.w2);
}

/// Runs the three phases with plain gradient descent, recording every
/// `⌈1/(10η)⌉` steps.
pub fn train_three_phase(plan: &PhasePlan, d: usize, target: &SineTarget, extra_p0: bool, rng: &mut RngStream) -> Result<ThreePhaseResult> {
    plan.validate()?;
    let cube = Cube::new(d)?;
    let mut params = SineNetParams {
        extra_p0,
        ..SineNetParams::zeros(d)
    };
    let every = ((1.0 / (10.0 * plan.eta)).ceil() as usize).max(1);
    let total = plan.steps_bias + plan.steps_phase1 + plan.steps_phase2;
    let mut trajectory = vec![];
    let mut monotone = [true; 3];
    let mut x1_reached = None;
    let mut x1x2_reached = None;
    let mut max_disc = 0.0f64;
    let mut after_bias = params.clone();
    let mut after_phase1 = params.clone();
    let mut prev_loss = [f64::INFINITY; 3];
    let tol = 1e-14;

    for step in 0..=total {
        let phase = if step < plan.steps_bias {
            SinePhase::BiasOnly
        } else if step < plan.steps_bias + plan.steps_phase1 {
            SinePhase::Phase1(rng.below(2))
        } else {
            SinePhase::Phase2
        };
        let idx = match phase {
            SinePhase::BiasOnly => 0,
            SinePhase::Phase1(_) => 1,
            SinePhase::Phase2 => 2,
        };
        if step == plan.steps_bias {
            after_bias = params.clone();
        }
        if step == plan.steps_bias + plan.steps_phase1 {
            after_phase1 = params.clone();
        }
        // the model whose coefficients are tracked: the one being trained
        let tracked = match phase {
            SinePhase::Phase1(_) => SinePhase::Phase1(0),
            p => p,
        };
        let coeffs = extract_coeffs(&phase_outputs(&params, tracked, &cube), &cube)?;
        if x1_reached.is_none() && coeffs.x1 / target.x1 >= 0.9 {
            x1_reached = Some(step);
        }
        if x1x2_reached.is_none() && coeffs.x1x2 / target.x1x2 >= 0.9 {
            x1x2_reached = Some(step);
        }
        let loss = population_loss(&params, phase, &cube, target);
        if !loss.is_finite() {
            return Err(LabError::Divergence { step });
        }
        if let SinePhase::Phase1(_) = phase {
            // the two layer objectives differ; compare their sum
            let both = population_loss(&params, SinePhase::Phase1(0), &cube, target)
                + population_loss(&params, SinePhase::Phase1(1), &cube, target);
            if both > prev_loss[1] * (1.0 + tol) {
                monotone[1] = false;
            }
            prev_loss[1] = both;
        } else {
            if loss > prev_loss[idx] * (1.0 + tol) {
                monotone[idx] = false;
            }
            prev_loss[idx] = loss;
        }
        if step % every == 0 || step == total {
            trajectory.push(TrajectoryRow {
                step,
                phase: phase.label().to_string(),
                p0: params.p0,
                w11: params.w1[0],
                w21: params.w2[0],
                w22: params.w2[1],
                b1: params.b1,
                b2: params.b2,
                loss,
            });
            max_disc = max_disc.max(gradient_discrepancy(&params, Some(phase), &cube, target, 1e-5)?);
        }
        if step == total {
            break;
        }
        let g = population_grad(&params, phase, &cube, target)?;
        apply(&mut params, &g, plan.eta);
    }
    let final_loss = mse(&full_outputs(&params, &cube), &cube.targets(target));
    Ok(ThreePhaseResult {
        trajectory,
        after_bias,
        after_phase1,
        final_params: params,
        final_loss,
        monotone,
        x1_reached,
        x1x2_reached,
        max_grad_discrepancy: max_disc,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestFit {
    pub loss: f64,
    pub restart: usize,
    pub p0: f64,
    pub w: Array1<f64>,
    pub b: f64,
}

/// Minimum over multi-start gradient descent of
/// `E(p0 + sin(⟨w, x⟩ + b) − target)²`. Ties go to the lowest restart.
pub fn single_layer_best_fit(d: usize, target: &SineTarget, restarts: usize, steps: usize, rng: &mut RngStream) -> Result<BestFit> {
    if restarts == 0 {
        return arg_err("need at least one restart");
    }
    let cube = Cube::new(d)?;
    let y = cube.targets(target);
    let n = y.len() as f64;
    let eta = 0.05;
    let loss_of = |p0: f64, w: &Array1<f64>, b: f64| {
        let out = (cube.x.dot(w) + b).mapv(|z| p0 + z.sin());
        mse(&out, &y)
    };
    let mut best: Option<BestFit> = None;
    for restart in 0..restarts {
        let (mut p0, mut w, mut b) = if restart == 0 {
            (0.0, Array1::zeros(d), 0.0)
        } else {
            let pi = std::f64::consts::PI;
            (
                rng.gauss(),
                Array1::from_shape_simple_fn(d, || pi * (2.0 * rng.uniform() - 1.0)),
                pi * (2.0 * rng.uniform() - 1.0),
            )
        };
        for _ in 0..steps {
            let z = cube.x.dot(&w) + b;
            let r = z.mapv(|z| p0 + z.sin()) - &y;
            let coef = 2.0 * &r * &z.mapv(f64::cos);
            p0 -= eta * 2.0 * r.sum() / n;
            w.scaled_add(-eta / n, &cube.x.t().dot(&coef));
            b -= eta * coef.sum() / n;
        }
        let loss = loss_of(p0, &w, b);
        if !loss.is_finite() {
            continue;
        }
        if best.as_ref().map_or(true, |bf| loss < bf.loss) {
            best = Some(BestFit { loss, restart, p0, w, b });
        }
    }
    best.ok_or(LabError::Divergence { step: steps })
}

//! Training loops over gated residual networks.
//!
//! All trainers share one step routine: draw a fresh batch, run the
//! (sub)network selected for this step, back-propagate, and update only the
//! blocks that took part. Metrics are recorded at regular intervals and
//! around every stage boundary.

mod lr;
mod optim;
mod pld;
mod stacking;
mod width;

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, LabError, Result};
use crate::netcore::{batch_squared_loss, h_sqrt, unit_scales, HiddenMask, ResidualNet, ScalePattern};
use crate::numkit::RngStream;
use crate::subnet::{sample_gates, StageSchedule};

pub use lr::{FinalDecay, LrSchedule};
pub use optim::{OptimizerConfig, OptimizerState};
pub use pld::{pld_alpha, pld_expected_flops, pld_keep_probs, pld_long_run_flops, pld_mean_keep, train_pld, PldConfig};
pub use stacking::{grow, grow_double, grow_interpolate, grow_topstack, train_stacking, GrowthOp, StackingPlan};
pub use width::{train_width_raptr, WidthSchedule};

/// Stream id used for per-step gate/group sampling.
pub const GATE_STREAM: u64 = 0x6a7e;

/// Supplies fresh i.i.d. training batches.
pub trait DataSource {
    fn width(&self) -> usize;
    fn sample(&mut self, n: usize) -> Result<(Array2<f64>, Array1<f64>)>;
}

/// Fixed held-out points.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
}

impl EvalSet {
    pub fn from_source(source: &mut dyn DataSource, n: usize) -> Result<Self> {
        let (x, y) = source.sample(n)?;
        Ok(Self { x, y })
    }
}

/// Mean squared loss of the full model (every scale 1) on `eval`.
pub fn eval_loss(net: &ResidualNet, eval: &EvalSet) -> Result<f64> {
    eval_loss_scaled(net, eval, &ScalePattern::ones(net.depth()))
}

pub fn eval_loss_scaled(net: &ResidualNet, eval: &EvalSet, scales: &ScalePattern) -> Result<f64> {
    let tape = net.forward(eval.x.view(), scales)?;
    Ok(batch_squared_loss(tape.output.view(), eval.y.view())?.0)
}

/// How active layers are scaled in a sampled subnetwork.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateScaling {
    /// Square-root gap scaling.
    #[default]
    Sqrt,
    /// Kept layers use scale 1.
    Unit,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub eval_every: usize,
    pub optimizer: OptimizerConfig,
    pub lr: LrSchedule,
    /// Seed for the gate/group sampling stream.
    pub seed: u64,
}

impl TrainSettings {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return arg_err("batch size must be positive");
        }
        if self.eval_every == 0 {
            return arg_err("eval_every must be positive");
        }
        self.lr.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// Number of completed steps.
    pub step: usize,
    /// Stage of the last completed step.
    pub stage: usize,
    /// Mean training loss since the previous record (NaN at step 0).
    pub train_loss: f64,
    pub eval_loss: f64,
    /// FLOPs spent so far as a fraction of a full-model run of equal length.
    pub flops_ratio: f64,
    /// Mean active layers since the previous record.
    pub mean_active: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<MetricRecord>,
    pub total_steps: usize,
}

impl RunMetrics {
    pub fn final_eval_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.eval_loss)
    }

    pub fn final_flops_ratio(&self) -> Option<f64> {
        self.records.last().map(|r| r.flops_ratio)
    }

    pub fn at_step(&self, step: usize) -> Option<&MetricRecord> {
        self.records.iter().find(|r| r.step == step)
    }
}

/// Called at step 0, every `eval_every` steps and at the end.
pub type EvalHook<'a> = &'a mut dyn FnMut(usize, &ResidualNet) -> Result<()>;

/// What one training step runs.
pub(crate) struct StepPlan {
    pub scales: ScalePattern,
    pub masks: Option<Vec<Option<HiddenMask>>>,
    pub active: Vec<bool>,
    /// FLOPs of this step relative to a full-model step.
    pub charge: f64,
    pub active_count: f64,
    pub stage: usize,
}

impl StepPlan {
    pub(crate) fn full(depth: usize, stage: usize) -> Self {
        Self {
            scales: ScalePattern::ones(depth),
            masks: None,
            active: vec![true; depth],
            charge: 1.0,
            active_count: depth as f64,
            stage,
        }
    }
}

/// Shared bookkeeping for one training run.
pub(crate) struct Session<'a, 'h> {
    data: &'a mut dyn DataSource,
    eval: &'a EvalSet,
    settings: TrainSettings,
    total: usize,
    final_start: usize,
    record_points: BTreeSet<usize>,
    hook_points: BTreeSet<usize>,
    hook: Option<EvalHook<'h>>,
    metrics: RunMetrics,
    flops_used: f64,
    window_loss: f64,
    window_active: f64,
    window_steps: usize,
    last_stage: usize,
}

impl<'a, 'h> Session<'a, 'h> {
    pub(crate) fn new(
        data: &'a mut dyn DataSource,
        eval: &'a EvalSet,
        settings: &TrainSettings,
        total: usize,
        boundaries: &[usize],
        hook: Option<EvalHook<'h>>,
    ) -> Result<Self> {
        settings.validate()?;
        if eval.x.nrows() == 0 || eval.x.nrows() != eval.y.len() {
            return arg_err("evaluation set is empty or inconsistent");
        }
        let mut hook_points: BTreeSet<usize> = (0..=total).step_by(settings.eval_every).collect();
        hook_points.insert(total);
        let mut record_points = hook_points.clone();
        for &b in boundaries.iter().filter(|&&b| b > 0 && b < total) {
            for p in [b.saturating_sub(50), b.saturating_sub(1), b, b + 1, b + 50] {
                if p <= total {
                    record_points.insert(p);
                }
            }
        }
        let final_start = boundaries.iter().copied().filter(|&b| b < total).max().unwrap_or(0);
        Ok(Self {
            data,
            eval,
            settings: *settings,
            total,
            final_start,
            record_points,
            hook_points,
            hook,
            metrics: RunMetrics {
                records: vec![],
                total_steps: total,
            },
            flops_used: 0.0,
            window_loss: 0.0,
            window_active: 0.0,
            window_steps: 0,
            last_stage: 0,
        })
    }

    pub(crate) fn lr(&self, t: usize) -> f64 {
        self.settings.lr.at(t, self.final_start, self.total)
    }

    /// Records metrics (and calls the hook) if `done` is an eval point.
    pub(crate) fn checkpoint(&mut self, done: usize, net: &ResidualNet) -> Result<()> {
        if self.hook_points.contains(&done) {
            if let Some(hook) = self.hook.as_mut() {
                hook(done, net)?;
            }
        }
        if !self.record_points.contains(&done) {
            return Ok(());
        }
        let eval_loss = eval_loss(net, self.eval).map_err(|_| LabError::Divergence { step: done })?;
        if !eval_loss.is_finite() {
            return Err(LabError::Divergence { step: done });
        }
        let (train_loss, mean_active) = if self.window_steps == 0 {
            (f64::NAN, net.depth() as f64)
        } else {
            let n = self.window_steps as f64;
            (self.window_loss / n, self.window_active / n)
        };
        self.metrics.records.push(MetricRecord {
            step: done,
            stage: self.last_stage,
            train_loss,
            eval_loss,
            flops_ratio: if self.total == 0 { 0.0 } else { self.flops_used / self.total as f64 },
            mean_active,
        });
        self.window_loss = 0.0;
        self.window_active = 0.0;
        self.window_steps = 0;
        Ok(())
    }

    /// Runs step `t` (0-based) with the given plan and updates `net`.
    pub(crate) fn step(&mut self, t: usize, net: &mut ResidualNet, opt: &mut OptimizerState, plan: StepPlan) -> Result<f64> {
        let (x, y) = self.data.sample(self.settings.batch_size)?;
        let diverged = |_| LabError::Divergence { step: t };
        let masks = plan.masks.unwrap_or_else(|| vec![None; net.depth()]);
        let tape = net.forward_masked(x.view(), &plan.scales, &masks).map_err(diverged)?;
        let (loss, upstream) = batch_squared_loss(tape.output.view(), y.view())?;
        if !loss.is_finite() {
            return Err(LabError::Divergence { step: t });
        }
        let grads = net.backward(&tape, upstream.view())?;
        let lr = self.lr(t);
        opt.step(net, &grads, &plan.active, lr)?;
        self.flops_used += plan.charge;
        self.window_loss += loss;
        self.window_active += plan.active_count;
        self.window_steps += 1;
        self.last_stage = plan.stage;
        Ok(loss)
    }

    pub(crate) fn finish(self) -> RunMetrics {
        self.metrics
    }
}

/// Full-model training for `steps` steps.
pub fn train_baseline(
    net: &mut ResidualNet,
    data: &mut dyn DataSource,
    eval: &EvalSet,
    steps: usize,
    settings: &TrainSettings,
    hook: Option<EvalHook>,
) -> Result<RunMetrics> {
    let mut opt = OptimizerState::new(settings.optimizer, net)?;
    let mut session = Session::new(data, eval, settings, steps, &[], hook)?;
    session.checkpoint(0, net)?;
    for t in 0..steps {
        session.step(t, net, &mut opt, StepPlan::full(net.depth(), 0))?;
        session.checkpoint(t + 1, net)?;
    }
    Ok(session.finish())
}

/// Gate pattern to scales, with an empty pattern mapping to all zeros.
pub fn gate_scales(gates: &crate::subnet::GatePattern, scaling: GateScaling) -> Result<ScalePattern> {
    if gates.active_count() == 0 {
        return Ok(ScalePattern(vec![0.0; gates.depth()]));
    }
    match scaling {
        GateScaling::Sqrt => h_sqrt(gates),
        GateScaling::Unit => Ok(unit_scales(gates)),
    }
}

/// Stagewise training on random `(p, I)` subnetworks.
pub fn train_raptr(
    net: &mut ResidualNet,
    data: &mut dyn DataSource,
    eval: &EvalSet,
    schedule: &StageSchedule,
    scaling: GateScaling,
    settings: &TrainSettings,
    hook: Option<EvalHook>,
) -> Result<RunMetrics> {
    let depth = net.depth();
    if schedule.depth() != depth {
        return arg_err(format!("schedule depth {} for a {depth}-layer net", schedule.depth()));
    }
    let total = schedule.total_steps();
    let mut gate_rng = RngStream::new(settings.seed, GATE_STREAM);
    let mut opt = OptimizerState::new(settings.optimizer, net)?;
    let mut session = Session::new(data, eval, settings, total, &schedule.boundaries(), hook)?;
    session.checkpoint(0, net)?;
    for t in 0..total {
        let stage = schedule.stage_index(t)?;
        let (p, fixed) = schedule.stage_at(t)?;
        let gates = sample_gates(p, fixed, depth, &mut gate_rng)?;
        let count = gates.active_count();
        let plan = StepPlan {
            scales: gate_scales(&gates, scaling)?,
            masks: None,
            active: gates.bits().to_vec(),
            charge: count as f64 / depth as f64,
            active_count: count as f64,
            stage,
        };
        session.step(t, net, &mut opt, plan)?;
        session.checkpoint(t + 1, net)?;
    }
    Ok(session.finish())
}

#[cfg(test)]
mod tests;

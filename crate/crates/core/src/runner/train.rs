//! One replica of a boolean-polynomial training run.

use serde::{Deserialize, Serialize};

use super::config::{BoolpolyTrainConfig, Method};
use crate::boolpoly::{net_function, sample_target, ComponentError, ComponentProbe, PolyData, SparsePolynomial};
use crate::error::{LabError, Result};
use crate::netcore::ResidualNet;
use crate::numkit::RngStream;
use crate::subnet::GatePattern;
use crate::trainers::{
    eval_loss, eval_loss_scaled, gate_scales, train_baseline, train_pld, train_raptr, train_stacking, train_width_raptr, EvalSet, GateScaling,
    PldConfig, RunMetrics, StackingPlan, TrainSettings, WidthSchedule,
};

/// Stream ids of the per-replica random sources.
const POLY_STREAM: u64 = 1;
const DATA_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;
const INIT_STREAM: u64 = 4;
const PROBE_STREAM: u64 = 5;
const FINAL_PROBE_STREAM: u64 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentRow {
    pub step: usize,
    pub degree: usize,
    pub error: f64,
    pub stderr: f64,
}

/// Full-model eval loss against each drop-one subnetwork's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropOneReport {
    pub full: f64,
    pub per_layer: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoolpolyOutcome {
    pub seed: u64,
    pub method: Method,
    pub metrics: RunMetrics,
    /// Probe rows during training; the final step uses the large probe.
    pub components: Vec<ComponentRow>,
    pub boundaries: Vec<usize>,
    /// `|L(b+1) − L(b−1)| / L(b−1)` for each interior boundary `b`.
    pub boundary_jumps: Vec<f64>,
    pub dropone: Option<DropOneReport>,
    pub polynomial: SparsePolynomial,
    /// Steps moved between stages by the target-average solver.
    pub schedule_shift: Option<i64>,
    /// The trained model; not serialized.
    #[serde(skip)]
    pub net: Option<ResidualNet>,
}

impl BoolpolyOutcome {
    pub fn final_eval_loss(&self) -> f64 {
        self.metrics.final_eval_loss().unwrap_or(f64::NAN)
    }

    pub fn final_flops_ratio(&self) -> f64 {
        self.metrics.final_flops_ratio().unwrap_or(f64::NAN)
    }

    /// Component errors at the last step, by degree.
    pub fn final_components(&self) -> Vec<ComponentRow> {
        let last = self.metrics.total_steps;
        self.components.iter().filter(|r| r.step == last).copied().collect()
    }

    /// First probed step at which the degree's error drops below `level`.
    pub fn crossing_step(&self, degree: usize, level: f64) -> Option<usize> {
        self.components.iter().filter(|r| r.degree == degree && r.error < level).map(|r| r.step).min()
    }
}

pub fn build_net(cfg: &BoolpolyTrainConfig, depth: usize, seed: u64) -> Result<ResidualNet> {
    let d = cfg.task.d;
    let hidden = cfg.model.hidden.unwrap_or(4 * d);
    let readout = cfg.model.readout_std.unwrap_or(0.1 / (d as f64).sqrt());
    ResidualNet::relu_mlp(d, hidden, depth, cfg.model.prenorm, readout, &mut RngStream::new(seed, INIT_STREAM))
}

pub fn planted_polynomial(cfg: &BoolpolyTrainConfig, seed: u64) -> Result<SparsePolynomial> {
    let t = &cfg.task;
    sample_target(t.d, t.k, t.per_degree, t.support, &mut RngStream::new(seed, POLY_STREAM))
}

fn push_rows(rows: &mut Vec<ComponentRow>, step: usize, errs: &[ComponentError]) {
    rows.extend(errs.iter().map(|e| ComponentRow {
        step,
        degree: e.degree,
        error: e.error,
        stderr: e.stderr,
    }));
}

/// Mean-squared eval loss of every network with one layer removed.
pub fn dropone_losses(net: &ResidualNet, eval: &EvalSet, scaling: GateScaling) -> Result<DropOneReport> {
    let depth = net.depth();
    let full = eval_loss(net, eval)?;
    let mut per_layer = Vec::with_capacity(depth);
    for l in 0..depth {
        let bits: Vec<bool> = (0..depth).map(|j| j != l).collect();
        let scales = gate_scales(&GatePattern::from_bits(bits, vec![])?, scaling)?;
        per_layer.push(eval_loss_scaled(net, eval, &scales)?);
    }
    let mean = per_layer.iter().sum::<f64>() / depth as f64;
    Ok(DropOneReport { full, per_layer, mean })
}

/// Relative full-model eval-loss change from `b − 1` to `b + 1` at every
/// boundary after the first stage.
pub fn boundary_jumps(metrics: &RunMetrics, boundaries: &[usize]) -> Vec<f64> {
    boundaries
        .iter()
        .filter(|&&b| b > 0 && b < metrics.total_steps)
        .filter_map(|&b| {
            let before = metrics.at_step(b - 1)?.eval_loss;
            let after = metrics.at_step(b + 1)?.eval_loss;
            Some((after - before).abs() / before)
        })
        .collect()
}

/// Trains one replica with the given seed.
pub fn run_boolpoly(cfg: &BoolpolyTrainConfig, seed: u64) -> Result<BoolpolyOutcome> {
    if cfg.probe_every % cfg.eval_every != 0 {
        return Err(LabError::Config("probe_every must be a multiple of eval_every".into()));
    }
    let poly = planted_polynomial(cfg, seed)?;
    let mut data = PolyData::new(poly.clone(), RngStream::new(seed, DATA_STREAM));
    let eval = EvalSet::from_source(&mut PolyData::new(poly.clone(), RngStream::new(seed, EVAL_STREAM)), cfg.eval_size)?;
    let probe = ComponentProbe::new(&poly, cfg.probe_samples, &mut RngStream::new(seed, PROBE_STREAM))?;
    let final_probe = ComponentProbe::new(&poly, cfg.final_probe_samples, &mut RngStream::new(seed, FINAL_PROBE_STREAM))?;
    let settings = TrainSettings {
        batch_size: cfg.batch_size,
        eval_every: cfg.eval_every,
        optimizer: cfg.optimizer,
        lr: cfg.lr,
        seed,
    };
    let steps = cfg.steps;
    let mut components = vec![];
    let mut hook = |step: usize, net: &ResidualNet| -> Result<()> {
        let f = net_function(net);
        if step == steps {
            push_rows(&mut components, step, &final_probe.evaluate(&f)?);
        } else if step % cfg.probe_every == 0 {
            push_rows(&mut components, step, &probe.evaluate(&f)?);
        }
        Ok(())
    };
    let depth = cfg.model.depth;
    let mut schedule_shift = None;
    let (net, metrics, boundaries) = match cfg.method {
        Method::Baseline => {
            let mut net = build_net(cfg, depth, seed)?;
            let m = train_baseline(&mut net, &mut data, &eval, steps, &settings, Some(&mut hook))?;
            (net, m, vec![])
        }
        Method::Raptr => {
            let built = cfg.schedule.build(depth, steps)?;
            schedule_shift = Some(built.shift);
            let mut net = build_net(cfg, depth, seed)?;
            let m = train_raptr(&mut net, &mut data, &eval, &built.schedule, cfg.scaling, &settings, Some(&mut hook))?;
            (net, m, built.schedule.boundaries())
        }
        Method::Pld => {
            let pld = PldConfig {
                keep_floor: cfg.pld.keep_floor,
                gamma_f: cfg.pld.gamma_f,
                steps,
            };
            let mut net = build_net(cfg, depth, seed)?;
            let m = train_pld(&mut net, &mut data, &eval, &pld, &settings, Some(&mut hook))?;
            (net, m, vec![])
        }
        Method::Stacking => {
            let plan = StackingPlan {
                sizes: cfg.stacking.sizes.clone(),
                op: cfg.stacking.op,
                mode: cfg.stacking.mode,
                steps,
            };
            if plan.sizes.last() != Some(&depth) {
                return Err(LabError::Config("the last stacking size must equal the model depth".into()));
            }
            let mut make = |l: usize| build_net(cfg, l, seed);
            let (net, m) = train_stacking(&mut make, &plan, &mut data, &eval, &settings, Some(&mut hook))?;
            let lengths = crate::subnet::stage_lengths(plan.mode, plan.sizes.len(), steps);
            let starts = lengths.iter().scan(0, |acc, &l| {
                let s = *acc;
                *acc += l;
                Some(s)
            });
            (net, m, starts.collect())
        }
        Method::WidthRaptr => {
            let sched = WidthSchedule {
                groups: cfg.width.groups,
                kept: cfg.width.kept.clone(),
                mode: cfg.width.mode,
                steps,
            };
            let mut net = build_net(cfg, depth, seed)?;
            let m = train_width_raptr(&mut net, &mut data, &eval, &sched, &settings, Some(&mut hook))?;
            (net, m, sched.boundaries())
        }
    };
    let dropone = if cfg.dropone_eval { Some(dropone_losses(&net, &eval, cfg.scaling)?) } else { None };
    Ok(BoolpolyOutcome {
        seed,
        method: cfg.method,
        boundary_jumps: boundary_jumps(&metrics, &boundaries),
        metrics,
        components,
        boundaries,
        dropone,
        polynomial: poly,
        schedule_shift,
        net: Some(net),
    })
}

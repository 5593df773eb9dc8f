use ndarray::Array1;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{DataSource, EvalHook, EvalSet, OptimizerState, RunMetrics, Session, StepPlan, TrainSettings, GATE_STREAM};
use crate::error::{arg_err, Result};
use crate::netcore::{BlockKind, HiddenMask, ResidualNet, ScalePattern};
use crate::numkit::RngStream;
use crate::subnet::{stage_lengths, LengthMode};

/// Hidden units of every MLP split into `groups` contiguous groups; stage
/// `s` keeps `kept[s]` random groups per layer per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WidthSchedule {
    #[serde(default = "four")]
    pub groups: usize,
    pub kept: Vec<usize>,
    pub mode: LengthMode,
    pub steps: usize,
}

fn four() -> usize {
    4
}

impl WidthSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.kept.is_empty() {
            return arg_err("width schedule needs groups and at least one stage");
        }
        if self.kept.iter().any(|&k| k == 0 || k > self.groups) {
            return arg_err("kept group counts must lie in 1..=groups");
        }
        if self.kept.windows(2).any(|w| w[1] < w[0]) {
            return arg_err("kept group counts must be nondecreasing");
        }
        let k = self.kept.len();
        if self.steps < k * (k + 1) / 2 {
            return arg_err("too few steps for the width stages");
        }
        Ok(())
    }

    pub fn boundaries(&self) -> Vec<usize> {
        let mut start = 0;
        stage_lengths(self.mode, self.kept.len(), self.steps)
            .into_iter()
            .map(|len| {
                let b = start;
                start += len;
                b
            })
            .collect()
    }

    /// Time-weighted mean fraction of MLP width in use.
    pub fn avg_width_fraction(&self) -> f64 {
        let lens = stage_lengths(self.mode, self.kept.len(), self.steps);
        let used: f64 = lens.iter().zip(&self.kept).map(|(&l, &k)| l as f64 * k as f64).sum();
        used / (self.steps as f64 * self.groups as f64)
    }
}

/// Mask keeping the listed groups of a `hidden`-unit layer.
pub(crate) fn group_mask(hidden: usize, groups: usize, chosen: &[usize]) -> HiddenMask {
    let size = hidden / groups;
    let mut keep = Array1::zeros(hidden);
    for &g in chosen {
        keep.slice_mut(ndarray::s![g * size..(g + 1) * size]).fill(1.0);
    }
    HiddenMask {
        keep,
        gain: groups as f64 / chosen.len() as f64,
    }
}

pub fn train_width_raptr(
    net: &mut ResidualNet,
    data: &mut dyn DataSource,
    eval: &EvalSet,
    schedule: &WidthSchedule,
    settings: &TrainSettings,
    hook: Option<EvalHook>,
) -> Result<RunMetrics> {
    schedule.validate()?;
    let mut hidden = Vec::with_capacity(net.depth());
    for b in net.blocks() {
        match b {
            BlockKind::ReluMlp { w, .. } if w.nrows() % schedule.groups == 0 => hidden.push(w.nrows()),
            BlockKind::ReluMlp { w, .. } => {
                return arg_err(format!("hidden width {} not divisible by {} groups", w.nrows(), schedule.groups))
            }
            _ => return arg_err("width subnetworks need relu mlp blocks"),
        }
    }
    let depth = net.depth();
    let boundaries = schedule.boundaries();
    let mut rng = RngStream::new(settings.seed, GATE_STREAM);
    let mut opt = OptimizerState::new(settings.optimizer, net)?;
    let mut session = Session::new(data, eval, settings, schedule.steps, &boundaries, hook)?;
    session.checkpoint(0, net)?;
    for t in 0..schedule.steps {
        let stage = boundaries.partition_point(|&b| b <= t) - 1;
        let kept = schedule.kept[stage];
        let masks = if kept == schedule.groups {
            None
        } else {
            Some(
                hidden
                    .iter()
                    .map(|&h| {
                        let chosen = sample(&mut rng, schedule.groups, kept).into_vec();
                        Some(group_mask(h, schedule.groups, &chosen))
                    })
                    .collect(),
            )
        };
        let plan = StepPlan {
            scales: ScalePattern::ones(depth),
            masks,
            active: vec![true; depth],
            charge: kept as f64 / schedule.groups as f64,
            active_count: depth as f64,
            stage,
        };
        session.step(t, net, &mut opt, plan)?;
        session.checkpoint(t + 1, net)?;
    }
    Ok(session.finish())
}

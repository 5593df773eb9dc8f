use serde::{Deserialize, Serialize};

use super::{DataSource, EvalHook, EvalSet, OptimizerState, RunMetrics, Session, StepPlan, TrainSettings};
use crate::error::{arg_err, Result};
use crate::netcore::ResidualNet;
use crate::subnet::{stage_lengths, LengthMode};

/// Depth growth operators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthOp {
    /// Copy the top layers, in order, on top of the stack.
    Topstack,
    /// Append a copy of the whole stack.
    Double,
    /// Insert a copy of each top layer right after its source.
    Interpolate,
}

fn check_growth(net: &ResidualNet, new_depth: usize) -> Result<usize> {
    let depth = net.depth();
    if new_depth <= depth {
        return arg_err(format!("cannot grow from {depth} to {new_depth} layers"));
    }
    let extra = new_depth - depth;
    if extra > depth {
        return arg_err(format!("growing {depth} layers by {extra} needs more source layers"));
    }
    Ok(extra)
}

pub fn grow_topstack(net: &ResidualNet, new_depth: usize) -> Result<ResidualNet> {
    let extra = check_growth(net, new_depth)?;
    let mut blocks = net.blocks().to_vec();
    blocks.extend_from_slice(&net.blocks()[net.depth() - extra..]);
    net.with_blocks(blocks)
}

pub fn grow_double(net: &ResidualNet) -> Result<ResidualNet> {
    grow_topstack(net, 2 * net.depth())
}

pub fn grow_interpolate(net: &ResidualNet, new_depth: usize) -> Result<ResidualNet> {
    let extra = check_growth(net, new_depth)?;
    let first_copied = net.depth() - extra;
    let mut blocks = Vec::with_capacity(new_depth);
    for (i, b) in net.blocks().iter().enumerate() {
        blocks.push(b.clone());
        if i >= first_copied {
            blocks.push(b.clone());
        }
    }
    net.with_blocks(blocks)
}

pub fn grow(net: &ResidualNet, op: GrowthOp, new_depth: usize) -> Result<ResidualNet> {
    match op {
        GrowthOp::Topstack => grow_topstack(net, new_depth),
        GrowthOp::Double => {
            if new_depth != 2 * net.depth() {
                return arg_err(format!("doubling {} layers cannot reach {new_depth}", net.depth()));
            }
            grow_double(net)
        }
        GrowthOp::Interpolate => grow_interpolate(net, new_depth),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackingPlan {
    /// Depth of each stage, strictly increasing; the last is the full depth.
    pub sizes: Vec<usize>,
    pub op: GrowthOp,
    pub mode: LengthMode,
    pub steps: usize,
}

/// Trains a shallow net and grows it at each stage boundary. `make_net`
/// builds the initial network at the first stage's depth. The optimizer
/// state is rebuilt after every growth.
pub fn train_stacking(
    make_net: &mut dyn FnMut(usize) -> Result<ResidualNet>,
    plan: &StackingPlan,
    data: &mut dyn DataSource,
    eval: &EvalSet,
    settings: &TrainSettings,
    hook: Option<EvalHook>,
) -> Result<(ResidualNet, RunMetrics)> {
    let k = plan.sizes.len();
    if k == 0 || plan.sizes[0] == 0 {
        return arg_err("stacking needs at least one nonempty stage");
    }
    if plan.sizes.windows(2).any(|w| w[1] <= w[0]) {
        return arg_err("stacking sizes must be strictly increasing");
    }
    if plan.steps < k * (k + 1) / 2 {
        return arg_err("too few steps for the stacking stages");
    }
    let full = *plan.sizes.last().expect("nonempty");
    let lengths = stage_lengths(plan.mode, k, plan.steps);
    let mut boundaries = Vec::with_capacity(k);
    let mut start = 0;
    for len in &lengths {
        boundaries.push(start);
        start += len;
    }
    let mut net = make_net(plan.sizes[0])?;
    if net.depth() != plan.sizes[0] {
        return arg_err("initial network depth does not match the first stage");
    }
    let mut opt = OptimizerState::new(settings.optimizer, &net)?;
    let mut session = Session::new(data, eval, settings, plan.steps, &boundaries, hook)?;
    session.checkpoint(0, &net)?;
    let mut stage = 0;
    for t in 0..plan.steps {
        if stage + 1 < k && t == boundaries[stage + 1] {
            stage += 1;
            net = grow(&net, plan.op, plan.sizes[stage])?;
            opt = OptimizerState::new(settings.optimizer, &net)?;
        }
        let depth = net.depth();
        let step_plan = StepPlan {
            charge: depth as f64 / full as f64,
            ..StepPlan::full(depth, stage)
        };
        session.step(t, &mut net, &mut opt, step_plan)?;
        session.checkpoint(t + 1, &net)?;
    }
    Ok((net, session.finish()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{BlockKind, Composition, Head};
    use ndarray::Array2;

    /// Net whose block `i` is `i·I`, so copies are easy to identify.
    fn tagged(depth: usize) -> ResidualNet {
        let blocks = (1..=depth)
            .map(|i| BlockKind::Linear {
                w: Array2::eye(2) * i as f64,
            })
            .collect();
        ResidualNet::new(blocks, Composition::Residual, Head::Identity).unwrap()
    }

    fn tags(net: &ResidualNet) -> Vec<usize> {
        net.blocks()
            .iter()
            .map(|b| match b {
                BlockKind::Linear { w } => w[[0, 0]] as usize,
                _ => unreachable!(),
            })
            .collect()
    }

    #[test]
    fn topstack_copies_top_layers() {
        assert_eq!(tags(&grow_topstack(&tagged(6), 9).unwrap()), vec![1, 2, 3, 4, 5, 6, 4, 5, 6]);
    }

    #[test]
    fn double_repeats_stack() {
        assert_eq!(tags(&grow_double(&tagged(3)).unwrap()), vec![1, 2, 3, 1, 2, 3]);
    }

    #[test]
    fn interpolate_inserts_after_source() {
        assert_eq!(tags(&grow_interpolate(&tagged(6), 9).unwrap()), vec![1, 2, 3, 4, 4, 5, 5, 6, 6]);
    }

    #[test]
    fn invalid_growth() {
        assert!(grow_topstack(&tagged(4), 4).is_err());
        assert!(grow_topstack(&tagged(4), 9).is_err());
        assert!(grow(&tagged(4), GrowthOp::Double, 6).is_err());
    }
}

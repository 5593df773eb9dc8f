use serde::{Deserialize, Serialize};

use super::{DataSource, EvalHook, EvalSet, OptimizerState, Session, StepPlan, TrainSettings, GATE_STREAM};
use crate::error::{arg_err, Result};
use crate::netcore::{ResidualNet, ScalePattern};
use crate::numkit::RngStream;

/// Progressive layer dropping: the keep floor decays in time towards
/// `keep_floor`, and keep probabilities decrease along depth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PldConfig {
    pub keep_floor: f64,
    #[serde(default = "default_gamma_f")]
    pub gamma_f: f64,
    pub steps: usize,
}

fn default_gamma_f() -> f64 {
    100.0
}

impl PldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_floor > 0.0 && self.keep_floor <= 1.0) {
            return arg_err(format!("keep floor {} outside (0, 1]", self.keep_floor));
        }
        if !(self.gamma_f > 0.0) || !self.gamma_f.is_finite() {
            return arg_err("gamma_f must be positive");
        }
        Ok(())
    }
}

/// `(1 − ᾱ)·exp(−γ t) + ᾱ`
pub fn pld_alpha(t: f64, keep_floor: f64, gamma: f64) -> f64 {
    (1.0 - keep_floor) * (-gamma * t).exp() + keep_floor
}

/// Keep probability of each layer: 1 for the first, then decreasing by
/// `(1 − α)/L` per layer.
pub fn pld_keep_probs(alpha: f64, depth: usize) -> Vec<f64> {
    let decay = (1.0 - alpha) / depth as f64;
    (0..depth).map(|i| 1.0 - decay * i as f64).collect()
}

pub fn pld_mean_keep(alpha: f64, depth: usize) -> f64 {
    1.0 - (depth as f64 - 1.0) * (1.0 - alpha) / (2.0 * depth as f64)
}

/// Long-run FLOPs ratio `1 − (1 − ᾱ)/2` (the deep-network limit of
/// [`pld_mean_keep`] at `α = ᾱ`).
pub fn pld_long_run_flops(keep_floor: f64) -> f64 {
    1.0 - (1.0 - keep_floor) / 2.0
}

/// Expected FLOPs ratio of a whole PLD run at a finite depth.
pub fn pld_expected_flops(cfg: &PldConfig, depth: usize) -> f64 {
    if cfg.steps == 0 {
        return 1.0;
    }
    let gamma = cfg.gamma_f / cfg.steps as f64;
    let sum: f64 = (1..=cfg.steps)
        .map(|t| pld_mean_keep(pld_alpha(t as f64, cfg.keep_floor, gamma), depth))
        .sum();
    sum / cfg.steps as f64
}

pub fn train_pld(
    net: &mut ResidualNet,
    data: &mut dyn DataSource,
    eval: &EvalSet,
    cfg: &PldConfig,
    settings: &TrainSettings,
    hook: Option<EvalHook>,
) -> Result<super::RunMetrics> {
    cfg.validate()?;
    let depth = net.depth();
    let gamma = cfg.gamma_f / cfg.steps.max(1) as f64;
    let mut rng = RngStream::new(settings.seed, GATE_STREAM);
    let mut opt = OptimizerState::new(settings.optimizer, net)?;
    let mut session = Session::new(data, eval, settings, cfg.steps, &[], hook)?;
    session.checkpoint(0, net)?;
    for t in 0..cfg.steps {
        let alpha = pld_alpha((t + 1) as f64, cfg.keep_floor, gamma);
        let probs = pld_keep_probs(alpha, depth);
        let mut scales = vec![0.0; depth];
        let mut active = vec![false; depth];
        for (l, &p) in probs.iter().enumerate() {
            if rng.bernoulli(p) {
                scales[l] = 1.0 / p;
                active[l] = true;
            }
        }
        let count = active.iter().filter(|&&a| a).count();
        let plan = StepPlan {
            scales: ScalePattern(scales),
            masks: None,
            active,
            charge: count as f64 / depth as f64,
            active_count: count as f64,
            stage: 0,
        };
        session.step(t, net, &mut opt, plan)?;
        session.checkpoint(t + 1, net)?;
    }
    Ok(session.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_endpoints() {
        assert_eq!(pld_alpha(0.0, 0.5, 0.01), 1.0);
        assert!((pld_alpha(1e6, 0.5, 0.01) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn keep_probs_decrease_from_one() {
        let p = pld_keep_probs(0.6, 4);
        assert_eq!(p[0], 1.0);
        assert!((p[3] - (1.0 - 3.0 * 0.1)).abs() < 1e-15);
        let mean: f64 = p.iter().sum::<f64>() / 4.0;
        assert!((mean - pld_mean_keep(0.6, 4)).abs() < 1e-15);
    }

    #[test]
    fn long_run_ratio() {
        assert_eq!(pld_long_run_flops(0.6), 0.8);
        assert_eq!(pld_long_run_flops(0.5), 0.75);
        // the finite-depth mean approaches the limit as depth grows
        let gap = |l| (pld_mean_keep(0.6, l) - 0.8f64).abs();
        assert!(gap(1000) < gap(12));
        assert!(gap(100_000) < 1e-5);
        let cfg = PldConfig {
            keep_floor: 0.6,
            gamma_f: 100.0,
            steps: 20_000,
        };
        let f = pld_expected_flops(&cfg, 12);
        assert!(f > pld_mean_keep(0.6, 12) && f < pld_mean_keep(0.6, 12) + 0.01);
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalDecay {
    #[default]
    None,
    Linear,
    Cosine,
}

/// Linear warmup, then constant, with an optional decay confined to the
/// final stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub peak_lr: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default)]
    pub final_decay: FinalDecay,
}

impl LrSchedule {
    pub fn constant(peak_lr: f64) -> Self {
        Self {
            peak_lr,
            warmup_steps: 0,
            final_decay: FinalDecay::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr >= 0.0) || !self.peak_lr.is_finite() {
            return arg_err(format!("learning rate {} must be finite and nonnegative", self.peak_lr));
        }
        Ok(())
    }

    /// Rate at 0-based step `t` of a run of `total` steps whose final stage
    /// starts at `final_start`.
    pub fn at(&self, t: usize, final_start: usize, total: usize) -> f64 {
        let warm = if t < self.warmup_steps {
            (t + 1) as f64 / self.warmup_steps as f64
        } else {
            1.0
        };
        let decay = if t >= final_start && total > final_start {
            let frac = (t - final_start) as f64 / (total - final_start) as f64;
            match self.final_decay {
                FinalDecay::None => 1.0,
                FinalDecay::Linear => 1.0 - frac,
                FinalDecay::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
            }
        } else {
            1.0
        };
        self.peak_lr * warm * decay
    }
}

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::netcore::{Gradients, ResidualNet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "eps")]
        eps: f64,
    },
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        OptimizerConfig::Adam {
            beta1: beta1(),
            beta2: beta2(),
            eps: eps(),
        }
    }

    pub fn sgd(momentum: f64) -> Self {
        OptimizerConfig::Sgd { momentum }
    }
}

#[derive(Clone, Debug)]
struct Slot {
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
    steps: u64,
}

impl Slot {
    fn new(shapes: &[Array2<f64>], with_second: bool) -> Self {
        Self {
            first: shapes.to_vec(),
            second: if with_second { shapes.to_vec() } else { vec![] },
            steps: 0,
        }
    }
}

/// Moment buffers for every block and the head. A block that is skipped in
/// a step is left untouched, buffers and step count included.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    config: OptimizerConfig,
    blocks: Vec<Slot>,
    head: Slot,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, net: &ResidualNet) -> Result<Self> {
        match config {
            OptimizerConfig::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                return arg_err(format!("momentum {momentum} outside [0, 1)"))
            }
            OptimizerConfig::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) =>
            {
                return arg_err("adam betas must lie in [0, 1) and eps must be positive")
            }
            _ => {}
        }
        let second = matches!(config, OptimizerConfig::Adam { .. });
        let zeros = net.zero_grads();
        Ok(Self {
            config,
            blocks: zeros.blocks.iter().map(|z| Slot::new(z, second)).collect(),
            head: Slot::new(&zeros.head, second),
        })
    }

    pub fn config(&self) -> OptimizerConfig {
        self.config
    }

    pub fn block_steps(&self, block: usize) -> u64 {
        self.blocks[block].steps
    }

    /// Applies one update with learning rate `lr` to the blocks flagged in
    /// `active` and to the head.
    pub fn step(&mut self, net: &mut ResidualNet, grads: &Gradients, active: &[bool], lr: f64) -> Result<()> {
        if active.len() != net.depth() || self.blocks.len() != net.depth() {
            return arg_err("optimizer state does not match the network depth");
        }
        let config = self.config;
        for (l, block) in net.blocks_mut().iter_mut().enumerate() {
            if !active[l] {
                continue;
            }
            let mut params = block.params_mut();
            update(config, &mut self.blocks[l], &mut params, &grads.blocks[l], lr);
        }
        let mut head = net.head_mut().params_mut();
        update(config, &mut self.head, &mut head, &grads.head, lr);
        Ok(())
    }
}

fn update(
    config: OptimizerConfig,
    slot: &mut Slot,
    params: &mut [ndarray::ArrayViewMut2<f64>],
    grads: &[Array2<f64>],
    lr: f64,
) {
    slot.steps += 1;
    match config {
        OptimizerConfig::Sgd { momentum } => {
            for ((p, g), buf) in params.iter_mut().zip(grads).zip(slot.first.iter_mut()) {
                if momentum == 0.0 {
                    p.scaled_add(-lr, g);
                } else {
                    Zip::from(&mut *buf).and(g).for_each(|b, &g| *b = momentum * *b + g);
                    p.scaled_add(-lr, buf);
                }
            }
        }
        OptimizerConfig::Adam { beta1, beta2, eps } => {
            let t = slot.steps as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for (((p, g), m), v) in params
                .iter_mut()
                .zip(grads)
                .zip(slot.first.iter_mut())
                .zip(slot.second.iter_mut())
            {
                Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
            }
        }
    }
}

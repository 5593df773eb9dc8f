//! Quick internal consistency checks: gradients, shared-base equivalence
//! and square-root scaling invariants.

use crate::error::Result;
use crate::netcore::{gradient_check, h_sqrt, BlockKind, Composition, Head, ResidualNet, ScalePattern};
use crate::numkit::{gauss_matrix, gauss_vector, RngStream};
use crate::sinelab::{gradient_discrepancy, Cube, SineNetParams, SinePhase, SineTarget};
use crate::subnet::{sample_gates, GatePattern};

use super::config::SharedbaseConfig;
use super::experiments::run_sharedbase;

#[derive(Clone, Debug, PartialEq)]
pub struct SelfCheck {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
}

impl SelfCheck {
    pub fn passed(&self) -> bool {
        self.value <= self.threshold
    }
}

fn heads(d: usize, rng: &mut RngStream) -> Result<Vec<(&'static str, Head)>> {
    Ok(vec![
        ("scalar_readout", Head::ScalarReadout { v: gauss_vector(d, 1.0, rng)? }),
        ("normalized_linear", Head::NormalizedLinear { v: gauss_matrix(3, d, 1.0, rng)? }),
        ("identity", Head::Identity),
    ])
}

/// Worst relative finite-difference error over every block kind and head,
/// with one layer dropped and uneven scales.
pub fn network_gradient_error(seed: u64) -> Result<f64> {
    let mut rng = RngStream::new(seed, 40);
    let d = 5;
    let depth = 3;
    let scales = ScalePattern(vec![1.0, 0.0, 2f64.sqrt()]);
    let mut worst = 0.0f64;
    let mut check = |net: ResidualNet, rng: &mut RngStream| -> Result<()> {
        let x = gauss_matrix(2, d, 1.0, rng)?;
        let w = gauss_matrix(2, net.out_dim(), 1.0, rng)?;
        worst = worst.max(gradient_check(&net, x.view(), &scales, &vec![None; depth], &w, 1e-5)?);
        Ok(())
    };
    for prenorm in [false, true] {
        for (_, head) in heads(d, &mut rng)? {
            let mut net = ResidualNet::relu_mlp(d, 7, depth, prenorm, 0.5, &mut rng)?;
            *net.head_mut() = head;
            check(net, &mut rng)?;
        }
    }
    for ln in [false, true] {
        for composition in [Composition::Residual, Composition::Plain] {
            for (_, head) in heads(d, &mut rng)? {
                let blocks = (0..depth)
                    .map(|_| {
                        let w = gauss_matrix(d, d, 0.4, &mut rng)?;
                        Ok(if ln { BlockKind::LinearLn { w } } else { BlockKind::Linear { w } })
                    })
                    .collect::<Result<Vec<_>>>()?;
                check(ResidualNet::new(blocks, composition, head)?, &mut rng)?;
            }
        }
    }
    Ok(worst)
}

/// Worst absolute finite-difference error of the sine-network gradients.
pub fn sine_gradient_error(seed: u64) -> Result<f64> {
    let mut rng = RngStream::new(seed, 41);
    let cube = Cube::new(5)?;
    let target = SineTarget::standard();
    let mut worst = 0.0f64;
    for extra_p0 in [false, true] {
        let p = SineNetParams {
            p0: rng.gauss(),
            w1: gauss_vector(5, 1.0, &mut rng)?,
            w2: gauss_vector(5, 1.0, &mut rng)?,
            b1: rng.gauss(),
            b2: rng.gauss(),
            extra_p0,
        };
        for phase in [None, Some(SinePhase::BiasOnly), Some(SinePhase::Phase1(0)), Some(SinePhase::Phase1(1)), Some(SinePhase::Phase2)] {
            worst = worst.max(gradient_discrepancy(&p, phase, &cube, &target, 1e-5)?);
        }
    }
    Ok(worst)
}

/// Worst violation of the square-root scaling invariants over random
/// patterns: dropped layers get 0, active ones `√gap`, and the squared
/// scales sum to `L` minus the first active index.
pub fn scaling_invariant_error(seed: u64, trials: usize) -> Result<f64> {
    let mut rng = RngStream::new(seed, 42);
    let mut worst = 0.0f64;
    let full = h_sqrt(&GatePattern::full(9))?;
    worst = worst.max(full.0.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max));
    for _ in 0..trials {
        let depth = 1 + rng.below(24);
        let g = sample_gates(rng.uniform(), &[], depth, &mut rng)?;
        if g.active_count() == 0 {
            continue;
        }
        let s = h_sqrt(&g)?;
        let active = g.active_indices();
        for (i, &j) in active.iter().enumerate() {
            let next = active.get(i + 1).copied().unwrap_or(depth);
            worst = worst.max((s.0[j] - ((next - j) as f64).sqrt()).abs());
        }
        for j in (0..depth).filter(|j| !g.bits()[*j]) {
            worst = worst.max(s.0[j].abs());
        }
        let sq: f64 = s.0.iter().map(|v| v * v).sum();
        worst = worst.max((sq - (depth - active[0]) as f64).abs());
    }
    Ok(worst)
}

pub fn selftest() -> Result<Vec<SelfCheck>> {
    let shared = run_sharedbase(&SharedbaseConfig::default())?;
    Ok(vec![
        SelfCheck {
            name: "network gradients vs finite differences (relative)".into(),
            value: network_gradient_error(1)?,
            threshold: 1e-5,
        },
        SelfCheck {
            name: "sine network gradients vs finite differences (absolute)".into(),
            value: sine_gradient_error(1)?,
            threshold: 1e-8,
        },
        SelfCheck {
            name: "shared-base vs gated gradients".into(),
            value: shared.max_discrepancy,
            threshold: 1e-12,
        },
        SelfCheck {
            name: "square-root scaling invariants".into(),
            value: scaling_invariant_error(1, 500)?,
            threshold: 1e-12,
        },
    ])
}

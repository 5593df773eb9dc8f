//! The non-training experiments: linear-network sweeps, the sine lab, the
//! shared-base check and schedule reports.

use serde::{Deserialize, Serialize};

use super::config::{ScheduleReportConfig, SharedbaseConfig, SinelabConfig, StabilitySweepConfig};
use crate::error::Result;
use crate::netcore::{BlockKind, Composition, Head, ResidualNet};
use crate::numkit::{gauss_matrix, gauss_vector, RngStream};
use crate::sharedbase::{equivalence_check, equivalence_check_scaled, flops_overhead, linear_step_macs, sgd_step_equivalence};
use crate::sinelab::{single_layer_best_fit, train_three_phase, BestFit, ThreePhaseResult};
use crate::stability::{fit_scaling_exponent, linear_net_experiment, LinearExperiment, LinearNetConfig};
use crate::subnet::{GatePattern, StageSchedule};

/// One network of a stability sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub config_id: String,
    pub variant: String,
    pub depth: usize,
    pub tau: f64,
    pub result: LinearExperiment,
    /// Slope of `log Ψ_ℓ` against `log(L/ℓ)`; absent for a single layer.
    pub psi_slope: Option<f64>,
}

/// Fitted log-log slopes of `|gap|` and the bound against depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentRow {
    pub variant: String,
    pub tau: f64,
    pub gap_slope: f64,
    pub bound_slope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub entries: Vec<SweepEntry>,
    pub exponents: Vec<ExponentRow>,
}

pub fn psi_decay_slope(psi: &[f64]) -> Result<f64> {
    let l = psi.len() as f64;
    let xs: Vec<f64> = (1..=psi.len()).map(|ell| l / ell as f64).collect();
    fit_scaling_exponent(&xs, psi)
}

pub fn run_stability_sweep(cfg: &StabilitySweepConfig) -> Result<SweepOutcome> {
    let mut entries = vec![];
    let mut exponents = vec![];
    for (vi, v) in cfg.variants.iter().enumerate() {
        for (ti, &tau) in cfg.taus.iter().enumerate() {
            let mut gaps = vec![];
            let mut bounds = vec![];
            for (di, &depth) in cfg.depths.iter().enumerate() {
                let net_cfg = LinearNetConfig {
                    depth,
                    d: cfg.d,
                    residual: v.residual,
                    layernorm: v.layernorm,
                    tau,
                    shared: v.shared,
                    random_std: v.random_std,
                };
                let stream = (vi * 10_000 + ti * 100 + di) as u64;
                let result = linear_net_experiment(&net_cfg, cfg.probes, &mut RngStream::new(cfg.seed, stream))?;
                gaps.push(result.gap.gap.abs());
                bounds.push(result.bound);
                let psi_slope = if depth > 1 { psi_decay_slope(&result.profile.psi).ok() } else { None };
                entries.push(SweepEntry {
                    config_id: format!("{}_L{}_tau{}", v.name, depth, tau),
                    variant: v.name.clone(),
                    depth,
                    tau,
                    result,
                    psi_slope,
                });
            }
            if cfg.depths.len() >= 3 {
                let ls: Vec<f64> = cfg.depths.iter().map(|&l| l as f64).collect();
                exponents.push(ExponentRow {
                    variant: v.name.clone(),
                    tau,
                    gap_slope: fit_scaling_exponent(&ls, &gaps).unwrap_or(f64::NAN),
                    bound_slope: fit_scaling_exponent(&ls, &bounds).unwrap_or(f64::NAN),
                });
            }
        }
    }
    Ok(SweepOutcome { entries, exponents })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SineOutcome {
    pub training: ThreePhaseResult,
    pub best_fit: BestFit,
}

pub fn run_sinelab(cfg: &SinelabConfig) -> Result<SineOutcome> {
    let training = train_three_phase(&cfg.plan, cfg.d, &cfg.target, cfg.extra_p0, &mut RngStream::new(cfg.seed, 1))?;
    let best_fit = single_layer_best_fit(cfg.d, &cfg.target, cfg.best_fit.restarts, cfg.best_fit.steps, &mut RngStream::new(cfg.seed, 2))?;
    Ok(SineOutcome { training, best_fit })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedbaseCase {
    pub case: usize,
    pub kind: String,
    pub depth: usize,
    pub active: usize,
    pub grad_unit: f64,
    pub grad_scaled: f64,
    pub step_scaled: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedbaseOutcome {
    pub cases: Vec<SharedbaseCase>,
    pub max_discrepancy: f64,
    pub overhead_1024_24: f64,
    pub mac_ratio_1024_24: f64,
}

fn random_net(kind: usize, depth: usize, cfg: &SharedbaseConfig, rng: &mut RngStream) -> Result<(String, ResidualNet)> {
    let d = cfg.d;
    match kind % 4 {
        0 | 1 => {
            let prenorm = kind % 4 == 1;
            let net = ResidualNet::relu_mlp(d, cfg.hidden, depth, prenorm, 0.5, rng)?;
            Ok((if prenorm { "relu_mlp_prenorm" } else { "relu_mlp" }.into(), net))
        }
        k => {
            let ln = k == 3;
            let composition = if rng.bernoulli(0.5) { Composition::Residual } else { Composition::Plain };
            let blocks = (0..depth)
                .map(|_| {
                    let w = gauss_matrix(d, d, 0.4, rng)?;
                    Ok(if ln { BlockKind::LinearLn { w } } else { BlockKind::Linear { w } })
                })
                .collect::<Result<Vec<_>>>()?;
            let head = Head::ScalarReadout {
                v: gauss_vector(d, 1.0, rng)?,
            };
            let name = format!("{}_{:?}", if ln { "linear_ln" } else { "linear" }, composition).to_lowercase();
            Ok((name, ResidualNet::new(blocks, composition, head)?))
        }
    }
}

pub fn run_sharedbase(cfg: &SharedbaseConfig) -> Result<SharedbaseOutcome> {
    let mut rng = RngStream::new(cfg.seed, 1);
    let mut cases = Vec::with_capacity(cfg.cases);
    for case in 0..cfg.cases {
        let depth = cfg.min_depth + rng.below(cfg.max_depth - cfg.min_depth + 1);
        let (kind, net) = random_net(case, depth, cfg, &mut rng)?;
        let mut bits: Vec<bool> = (0..depth).map(|_| rng.bernoulli(0.5)).collect();
        if !bits.iter().any(|&b| b) {
            bits[rng.below(depth)] = true;
        }
        let gates = GatePattern::from_bits(bits, vec![])?;
        let x = gauss_matrix(cfg.batch, cfg.d, 1.0, &mut rng)?;
        cases.push(SharedbaseCase {
            case,
            kind,
            depth,
            active: gates.active_count(),
            grad_unit: equivalence_check(&net, x.view(), &gates)?,
            grad_scaled: equivalence_check_scaled(&net, x.view(), &gates)?,
            step_scaled: sgd_step_equivalence(&net, x.view(), &gates, cfg.lr, true)?,
        });
    }
    let max_discrepancy = cases
        .iter()
        .flat_map(|c| [c.grad_unit, c.grad_scaled, c.step_scaled])
        .fold(0.0f64, f64::max);
    Ok(SharedbaseOutcome {
        cases,
        max_discrepancy,
        overhead_1024_24: flops_overhead(1024, 24),
        mac_ratio_1024_24: linear_step_macs(1024, 64, 24, 12).ratio(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: usize,
    pub start: usize,
    pub length: usize,
    pub p: f64,
    pub mean_active: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleOutcome {
    pub shift: i64,
    pub boundaries: Vec<usize>,
    pub avg_length: f64,
    pub relative_flops: f64,
    pub stages: Vec<StageRow>,
}

fn stage_rows(s: &StageSchedule) -> Vec<StageRow> {
    s.stages()
        .iter()
        .enumerate()
        .map(|(i, st)| StageRow {
            stage: i,
            start: st.start,
            length: s.stage_len(i),
            p: st.p,
            mean_active: st.mean_active(s.depth()),
        })
        .collect()
}

pub fn run_schedule_report(cfg: &ScheduleReportConfig) -> Result<ScheduleOutcome> {
    let built = cfg.schedule.build(cfg.depth, cfg.total_steps)?;
    let s = &built.schedule;
    Ok(ScheduleOutcome {
        shift: built.shift,
        boundaries: s.boundaries(),
        avg_length: s.avg_length(),
        relative_flops: s.avg_relative_flops(),
        stages: stage_rows(s),
    })
}

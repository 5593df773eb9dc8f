//! Config-driven experiment runner: dispatches a JSON config to the right
//! trainer or probe and writes CSV artifacts plus a `manifest.json`.

mod config;
mod experiments;
mod train;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub use config::*;
pub use experiments::*;
pub use train::*;

use crate::error::{LabError, Result};

/// Environment variable capping the number of replica workers.
pub const THREADS_ENV: &str = "RAPTR_LAB_THREADS";

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_INFEASIBLE: i32 = 4;

/// Process exit code for an error.
pub fn exit_code(err: &LabError) -> i32 {
    match err {
        LabError::Config(_) | LabError::Json(_) | LabError::Argument(_) | LabError::Dimension(_) => EXIT_CONFIG,
        LabError::Divergence { .. } | LabError::NonFinite { .. } => EXIT_DIVERGENCE,
        LabError::InfeasibleSchedule(_) => EXIT_INFEASIBLE,
        _ => EXIT_OTHER,
    }
}

/// Workers to use: `RAPTR_LAB_THREADS` if set to a positive integer,
/// otherwise the available parallelism.
pub fn worker_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Runs `f` on every job with at most [`worker_count`] threads; results
/// keep the job order.
pub fn run_parallel<J: Sync, T: Send>(jobs: &[J], f: impl Fn(&J) -> T + Sync) -> Vec<T> {
    let workers = worker_count().min(jobs.len()).max(1);
    if workers == 1 {
        return jobs.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<T>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let out = f(&jobs[i]);
                *slots[i].lock().expect("slot lock") = Some(out);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("slot lock").expect("job ran")).collect()
}

/// Hex SHA-256 of the config's canonical JSON.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let canonical = serde_json::to_string(&serde_json::to_value(cfg)?)?;
    Ok(format!("{:x}", Sha256::digest(canonical.as_bytes())))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_manifest(dir: &Path, cfg: &ExperimentConfig, summary: Value, extra: Option<(&str, Value)>) -> Result<()> {
    let mut m = json!({
        "experiment": cfg.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "config_sha256": config_hash(cfg)?,
        "config": serde_json::to_value(cfg)?,
        "summary": summary,
    });
    if let Some((k, v)) = extra {
        m[k] = v;
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

/// What a run produced, for printing.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub lines: Vec<String>,
}

pub const METRICS_HEADER: [&str; 6] = ["step", "stage", "train_loss", "eval_loss", "flops_ratio", "mean_active"];
pub const COMPONENTS_HEADER: [&str; 4] = ["step", "degree", "error", "stderr"];
pub const STABILITY_HEADER: [&str; 4] = ["config_id", "ell", "norm", "psi"];
pub const GAPS_HEADER: [&str; 7] = ["config_id", "L", "tau", "loss_full", "loss_dropone", "gap", "bound_rhs"];
pub const TRAJECTORY_HEADER: [&str; 9] = ["step", "phase", "p0", "w11", "w21", "w22", "b1", "b2", "loss"];

fn boolpoly_summary(o: &BoolpolyOutcome) -> Value {
    json!({
        "seed": o.seed,
        "method": o.method,
        "final_eval_loss": o.final_eval_loss(),
        "final_flops_ratio": o.final_flops_ratio(),
        "final_components": o.final_components(),
        "boundaries": o.boundaries,
        "boundary_jumps": o.boundary_jumps,
        "schedule_shift": o.schedule_shift,
        "dropone": o.dropone,
    })
}

fn write_boolpoly_dir(dir: &Path, cfg: &ExperimentConfig, o: &BoolpolyOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_csv(&dir.join("metrics.csv"), &o.metrics.records, &METRICS_HEADER)?;
    write_csv(&dir.join("components.csv"), &o.components, &COMPONENTS_HEADER)?;
    if let Some(d) = &o.dropone {
        let rows: Vec<(usize, f64)> = d.per_layer.iter().enumerate().map(|(l, &v)| (l + 1, v)).collect();
        write_csv(&dir.join("dropone.csv"), &rows, &["ell", "eval_loss"])?;
    }
    write_manifest(dir, cfg, boolpoly_summary(o), Some(("polynomial", serde_json::to_value(&o.polynomial)?)))
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains every replica of a boolean-polynomial config in parallel.
pub fn run_boolpoly_replicas(cfg: &BoolpolyTrainConfig) -> Vec<Result<BoolpolyOutcome>> {
    let seeds: Vec<u64> = (0..cfg.replicas as u64).map(|i| cfg.seed + i).collect();
    run_parallel(&seeds, |&s| run_boolpoly(cfg, s))
}

fn run_boolpoly_config(full: &ExperimentConfig, cfg: &BoolpolyTrainConfig) -> Result<RunReport> {
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    let outcomes: Vec<BoolpolyOutcome> = run_boolpoly_replicas(cfg).into_iter().collect::<Result<_>>()?;
    let mut lines = vec![];
    if outcomes.len() == 1 {
        let o = &outcomes[0];
        write_boolpoly_dir(&dir, full, o)?;
        lines.push(format!(
            "{} seed {}: final eval loss {:.6}, flops ratio {:.4}",
            o.method.label(),
            o.seed,
            o.final_eval_loss(),
            o.final_flops_ratio()
        ));
    } else {
        let mut rows = vec![];
        for o in &outcomes {
            let mut single = cfg.clone();
            single.seed = o.seed;
            single.replicas = 1;
            single.output_dir = dir.join(format!("seed_{}", o.seed));
            write_boolpoly_dir(&single.output_dir, &ExperimentConfig::BoolpolyTrain(single.clone()), o)?;
            rows.push((o.seed, o.final_eval_loss(), o.final_flops_ratio()));
            lines.push(format!("seed {}: final eval loss {:.6}, flops ratio {:.4}", o.seed, o.final_eval_loss(), o.final_flops_ratio()));
        }
        write_csv(&dir.join("summary.csv"), &rows, &["seed", "final_eval_loss", "flops_ratio"])?;
        let med = median(outcomes.iter().map(|o| o.final_eval_loss()).collect());
        lines.push(format!("median final eval loss {med:.6}"));
        let summary = json!({
            "seeds": outcomes.iter().map(|o| o.seed).collect::<Vec<_>>(),
            "median_final_eval_loss": med,
            "runs": outcomes.iter().map(boolpoly_summary).collect::<Vec<_>>(),
        });
        write_manifest(&dir, full, summary, None)?;
    }
    Ok(RunReport { output_dir: dir, lines })
}

#[derive(Serialize)]
struct StabilityRow<'a> {
    config_id: &'a str,
    ell: usize,
    norm: f64,
    psi: f64,
}

#[derive(Serialize)]
struct GapRow<'a> {
    config_id: &'a str,
    depth: usize,
    tau: f64,
    loss_full: f64,
    loss_dropone: f64,
    gap: f64,
    bound_rhs: f64,
}

fn write_sweep(dir: &Path, full: &ExperimentConfig, o: &SweepOutcome) -> Result<Vec<String>> {
    let mut srows = vec![];
    let mut grows = vec![];
    for e in &o.entries {
        let p = &e.result.profile;
        for (i, (&n, &psi)) in p.norms.iter().zip(p.psi.iter()).enumerate() {
            srows.push(StabilityRow {
                config_id: &e.config_id,
                ell: i + 1,
                norm: n,
                psi,
            });
        }
        grows.push(GapRow {
            config_id: &e.config_id,
            depth: e.depth,
            tau: e.tau,
            loss_full: e.result.gap.loss_full,
            loss_dropone: e.result.gap.loss_dropone,
            gap: e.result.gap.gap,
            bound_rhs: e.result.bound,
        });
    }
    write_csv(&dir.join("stability.csv"), &srows, &STABILITY_HEADER)?;
    write_csv(&dir.join("gaps.csv"), &grows, &GAPS_HEADER)?;
    if !o.exponents.is_empty() {
        write_csv(&dir.join("exponents.csv"), &o.exponents, &["variant", "tau", "gap_slope", "bound_slope"])?;
    }
    let summary = json!({
        "exponents": o.exponents,
        "entries": o.entries.iter().map(|e| json!({
            "config_id": e.config_id,
            "mu": e.result.mu,
            "gap_stderr": e.result.gap.stderr,
            "bound_stderr": e.result.bound_stderr,
            "psi_slope": e.psi_slope,
            "output_norm_mean": e.result.profile.output_norm_mean,
        })).collect::<Vec<_>>(),
    });
    write_manifest(dir, full, summary, None)?;
    let mut lines: Vec<String> = o
        .exponents
        .iter()
        .map(|x| format!("{} tau {}: gap exponent {:.3}, bound exponent {:.3}", x.variant, x.tau, x.gap_slope, x.bound_slope))
        .collect();
    lines.push(format!("{} configurations", o.entries.len()));
    Ok(lines)
}

fn write_sine(dir: &Path, full: &ExperimentConfig, o: &SineOutcome) -> Result<Vec<String>> {
    let t = &o.training;
    write_csv(&dir.join("sine_trajectory.csv"), &t.trajectory, &TRAJECTORY_HEADER)?;
    let summary = json!({
        "after_bias": t.after_bias,
        "after_phase1": t.after_phase1,
        "final_params": t.final_params,
        "final_loss": t.final_loss,
        "monotone": t.monotone,
        "x1_reached": t.x1_reached,
        "x1x2_reached": t.x1x2_reached,
        "max_grad_discrepancy": t.max_grad_discrepancy,
        "best_fit": o.best_fit,
    });
    write_manifest(dir, full, summary, None)?;
    Ok(vec![
        format!("final population loss {:.6}", t.final_loss),
        format!("x1 coefficient at 90% by step {:?}, x1*x2 by step {:?}", t.x1_reached, t.x1x2_reached),
        format!("single-layer best fit loss {:.6} (restart {})", o.best_fit.loss, o.best_fit.restart),
    ])
}

fn write_sharedbase(dir: &Path, full: &ExperimentConfig, o: &SharedbaseOutcome) -> Result<Vec<String>> {
    write_csv(
        &dir.join("sharedbase.csv"),
        &o.cases,
        &["case", "kind", "depth", "active", "grad_unit", "grad_scaled", "step_scaled"],
    )?;
    let summary = json!({
        "max_discrepancy": o.max_discrepancy,
        "flops_overhead_1024_24": o.overhead_1024_24,
        "mac_ratio_1024_24": o.mac_ratio_1024_24,
    });
    write_manifest(dir, full, summary, None)?;
    Ok(vec![
        format!("max discrepancy {:e} over {} cases", o.max_discrepancy, o.cases.len()),
        format!("flops overhead (B=1024, L=24) {:.6}", o.overhead_1024_24),
    ])
}

fn write_schedule(dir: &Path, full: &ExperimentConfig, o: &ScheduleOutcome) -> Result<Vec<String>> {
    write_csv(&dir.join("schedule.csv"), &o.stages, &["stage", "start", "length", "p", "mean_active"])?;
    write_manifest(dir, full, serde_json::to_value(o)?, None)?;
    let b: Vec<String> = o.boundaries.iter().map(|b| b.to_string()).collect();
    Ok(vec![
        format!("x = {}", o.shift),
        format!("boundaries {}", b.join(" ")),
        format!("average length {:.6}, relative flops {:.6}", o.avg_length, o.relative_flops),
    ])
}

/// Runs a parsed config and writes its artifacts.
pub fn run(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    if let ExperimentConfig::BoolpolyTrain(c) = cfg {
        return run_boolpoly_config(cfg, c);
    }
    let dir = cfg.output_dir().to_path_buf();
    fs::create_dir_all(&dir)?;
    let lines = match cfg {
        ExperimentConfig::StabilitySweep(c) => write_sweep(&dir, cfg, &run_stability_sweep(c)?)?,
        ExperimentConfig::Sinelab(c) => write_sine(&dir, cfg, &run_sinelab(c)?)?,
        ExperimentConfig::SharedbaseCheck(c) => write_sharedbase(&dir, cfg, &run_sharedbase(c)?)?,
        ExperimentConfig::ScheduleReport(c) => write_schedule(&dir, cfg, &run_schedule_report(c)?)?,
        ExperimentConfig::BoolpolyTrain(_) => unreachable!("handled above"),
    };
    Ok(RunReport { output_dir: dir, lines })
}

/// Loads and runs a config file. `output_dir` overrides the config's.
pub fn run_path(path: &Path, output_dir: Option<PathBuf>) -> Result<RunReport> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(d) = output_dir {
        cfg.set_output_dir(d);
    }
    run(&cfg)
}

mod compare;
mod selftest;

pub use compare::{compare, CompareRow};
pub use selftest::{network_gradient_error, scaling_invariant_error, selftest, sine_gradient_error, SelfCheck};

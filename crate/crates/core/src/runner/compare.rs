//! Side-by-side table of completed boolean-polynomial runs.

use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::error::{LabError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub run: String,
    pub method: String,
    pub seed: u64,
    pub final_eval_loss: f64,
    pub flops_ratio: f64,
    /// Final component error per degree, degree 1 first.
    pub component_errors: Vec<f64>,
}

struct RunDir {
    task: Value,
    row: CompareRow,
}

fn incompatible(msg: String) -> LabError {
    LabError::Config(msg)
}

fn read_run(dir: &Path) -> Result<RunDir> {
    let text = fs::read_to_string(dir.join("manifest.json")).map_err(|e| incompatible(format!("{}: {e}", dir.display())))?;
    let manifest: Value = serde_json::from_str(&text)?;
    if manifest["experiment"] != "boolpoly_train" {
        return Err(incompatible(format!("{} is not a boolpoly_train run", dir.display())));
    }
    let cfg = &manifest["config"];
    if cfg["replicas"].as_u64() != Some(1) {
        return Err(incompatible(format!("{} holds several replicas; pass its seed_* directories", dir.display())));
    }

    let mut metrics = csv::Reader::from_path(dir.join("metrics.csv"))?;
    let mut last: Option<(f64, f64)> = None;
    for rec in metrics.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).and_then(|s| s.parse::<f64>().ok()).unwrap_or(f64::NAN);
        last = Some((field(3), field(4)));
    }
    let (final_eval_loss, flops_ratio) = last.ok_or_else(|| incompatible(format!("{} has no metrics", dir.display())))?;

    let mut comps = csv::Reader::from_path(dir.join("components.csv"))?;
    let mut rows: Vec<(u64, usize, f64)> = vec![];
    for rec in comps.records() {
        let rec = rec?;
        let step = rec.get(0).and_then(|s| s.parse().ok()).unwrap_or(0);
        let degree = rec.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
        let err = rec.get(2).and_then(|s| s.parse().ok()).unwrap_or(f64::NAN);
        rows.push((step, degree, err));
    }
    let last_step = rows.iter().map(|r| r.0).max().unwrap_or(0);
    let mut finals: Vec<(usize, f64)> = rows.iter().filter(|r| r.0 == last_step).map(|r| (r.1, r.2)).collect();
    finals.sort_by_key(|r| r.0);

    Ok(RunDir {
        task: cfg["task"].clone(),
        row: CompareRow {
            run: dir.display().to_string(),
            method: cfg["method"].as_str().unwrap_or("?").to_string(),
            seed: cfg["seed"].as_u64().unwrap_or(0),
            final_eval_loss,
            flops_ratio,
            component_errors: finals.into_iter().map(|r| r.1).collect(),
        },
    })
}

/// Reads each run directory and returns the rows plus the CSV table.
pub fn compare<P: AsRef<Path>>(dirs: &[P]) -> Result<(Vec<CompareRow>, String)> {
    if dirs.len() < 2 {
        return Err(incompatible("compare needs at least two run directories".into()));
    }
    let runs: Vec<RunDir> = dirs.iter().map(|d| read_run(d.as_ref())).collect::<Result<_>>()?;
    let task = &runs[0].task;
    if let Some(bad) = runs.iter().find(|r| &r.task != task) {
        return Err(incompatible(format!("{} was trained on a different task ({} vs {})", bad.row.run, bad.task, task)));
    }
    let degrees = runs.iter().map(|r| r.row.component_errors.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(vec![]);
    let mut header = vec!["run".to_string(), "method".into(), "seed".into(), "final_eval_loss".into(), "flops_ratio".into()];
    header.extend((1..=degrees).map(|k| format!("degree_{k}")));
    w.write_record(&header)?;
    for r in &runs {
        let mut rec = vec![
            r.row.run.clone(),
            r.row.method.clone(),
            r.row.seed.to_string(),
            r.row.final_eval_loss.to_string(),
            r.row.flops_ratio.to_string(),
        ];
        rec.extend(r.row.component_errors.iter().map(|e| e.to_string()));
        rec.resize(header.len(), String::new());
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| LabError::Io(e.into_error()))?;
    let table = String::from_utf8(bytes).map_err(|e| LabError::Config(e.to_string()))?;
    Ok((runs.into_iter().map(|r| r.row).collect(), table))
}

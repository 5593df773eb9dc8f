use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use raptr_lab::runner::{
    self, compare, config_hash, exit_code, run, ExperimentConfig, COMPONENTS_HEADER, EXIT_CONFIG, EXIT_INFEASIBLE, METRICS_HEADER,
};

fn tiny_boolpoly(method: &str, dir: &Path, seed: u64) -> Value {
    json!({
        "experiment": "boolpoly_train",
        "method": method,
        "seed": seed,
        "output_dir": dir,
        "task": {"d": 10, "k": 3, "per_degree": 3, "support": 8},
        "model": {"depth": 12, "hidden": 12},
        "steps": 240,
        "eval_every": 60,
        "eval_size": 256,
        "probe_every": 120,
        "probe_samples": 512,
        "final_probe_samples": 1024
    })
}

fn parse(v: &Value) -> ExperimentConfig {
    ExperimentConfig::from_json(&v.to_string()).unwrap()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn boolpoly_artifacts_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = parse(&tiny_boolpoly("raptr", tmp.path(), 1));
    let report = run(&cfg).unwrap();
    assert_eq!(report.output_dir, tmp.path());
    assert_eq!(header(&tmp.path().join("metrics.csv")), METRICS_HEADER.join(","));
    assert_eq!(header(&tmp.path().join("components.csv")), COMPONENTS_HEADER.join(","));

    let manifest: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["experiment"], "boolpoly_train");
    assert_eq!(manifest["config_sha256"], config_hash(&cfg).unwrap());
    assert!(manifest["polynomial"]["terms"].as_array().unwrap().len() == 9);
    assert!(manifest["summary"]["final_eval_loss"].as_f64().unwrap().is_finite());

    let mut rdr = csv::Reader::from_path(tmp.path().join("metrics.csv")).unwrap();
    let steps: Vec<u64> = rdr.records().map(|r| r.unwrap()[0].parse().unwrap()).collect();
    assert_eq!(steps.first(), Some(&0));
    assert_eq!(steps.last(), Some(&240));
    assert!(steps.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn same_seed_gives_identical_csvs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for method in ["raptr", "pld"] {
        run(&parse(&tiny_boolpoly(method, a.path(), 3))).unwrap();
        run(&parse(&tiny_boolpoly(method, b.path(), 3))).unwrap();
        for f in ["metrics.csv", "components.csv"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{method} {f}");
        }
    }
}

#[test]
fn different_seeds_differ() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run(&parse(&tiny_boolpoly("baseline", a.path(), 1))).unwrap();
    run(&parse(&tiny_boolpoly("baseline", b.path(), 2))).unwrap();
    assert_ne!(fs::read(a.path().join("metrics.csv")).unwrap(), fs::read(b.path().join("metrics.csv")).unwrap());
}

#[test]
fn replicas_get_their_own_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = tiny_boolpoly("baseline", tmp.path(), 5);
    v["replicas"] = json!(2);
    v["steps"] = json!(60);
    let report = run(&parse(&v)).unwrap();
    for s in [5, 6] {
        assert!(tmp.path().join(format!("seed_{s}")).join("metrics.csv").exists());
    }
    assert!(tmp.path().join("summary.csv").exists());
    assert!(report.lines.last().unwrap().starts_with("median final eval loss"));
    let (rows, table) = compare(&[tmp.path().join("seed_5"), tmp.path().join("seed_6")]).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].component_errors.len(), 3);
    assert!(table.starts_with("run,method,seed,final_eval_loss,flops_ratio,degree_1,degree_2,degree_3\n"));
}

#[test]
fn compare_rejects_mixed_tasks_and_replica_roots() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut v = tiny_boolpoly("baseline", a.path(), 1);
    v["steps"] = json!(60);
    run(&parse(&v)).unwrap();
    let mut w = tiny_boolpoly("baseline", b.path(), 1);
    w["steps"] = json!(60);
    w["task"]["d"] = json!(12);
    run(&parse(&w)).unwrap();
    let err = compare(&[a.path(), b.path()]).unwrap_err();
    assert_eq!(exit_code(&err), EXIT_CONFIG);
    assert!(compare(&[a.path()]).is_err());
}

#[test]
fn unknown_keys_and_bad_values_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = tiny_boolpoly("raptr", tmp.path(), 1);
    v["stepz"] = json!(3);
    let err = ExperimentConfig::from_json(&v.to_string()).unwrap_err();
    assert_eq!(exit_code(&err), EXIT_CONFIG);

    let mut v = tiny_boolpoly("raptr", tmp.path(), 1);
    v["model"]["depht"] = json!(3);
    assert!(ExperimentConfig::from_json(&v.to_string()).is_err());

    let err = ExperimentConfig::from_json(r#"{"experiment": "nope"}"#).unwrap_err();
    assert_eq!(exit_code(&err), EXIT_CONFIG);

    let bad_lr = json!({"experiment": "sinelab", "output_dir": tmp.path(), "plan": {"steps_bias": 1, "steps_phase1": 1, "steps_phase2": 1, "eta": 0.5}});
    assert!(ExperimentConfig::from_json(&bad_lr.to_string()).is_err());
}

#[test]
fn infeasible_schedule_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let v = json!({
        "experiment": "schedule_report",
        "output_dir": tmp.path(),
        "depth": 24,
        "total_steps": 400000,
        "schedule": {"stages": [{"size": 6}, {"size": 12}, {"size": 24}], "mode": "equal", "target_avg": 30}
    });
    let err = ExperimentConfig::from_json(&v.to_string()).and_then(|c| run(&c)).unwrap_err();
    assert_eq!(exit_code(&err), EXIT_INFEASIBLE);
}

#[test]
fn schedule_report_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::load(Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/schedule_report.json"))).unwrap();
    cfg.set_output_dir(tmp.path().to_path_buf());
    let report = run(&cfg).unwrap();
    assert!(report.lines.iter().any(|l| l == "x = 22000"));
    assert!(report.lines.iter().any(|l| l == "boundaries 0 18000 76000 174000"));
    assert_eq!(header(&tmp.path().join("schedule.csv")), "stage,start,length,p,mean_active");
}

#[test]
fn small_experiments_write_their_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let sine = json!({
        "experiment": "sinelab", "output_dir": tmp.path().join("sine"), "d": 3,
        "plan": {"steps_bias": 200, "steps_phase1": 200, "steps_phase2": 200, "eta": 0.01},
        "best_fit": {"restarts": 2, "steps": 50}
    });
    run(&parse(&sine)).unwrap();
    assert_eq!(header(&tmp.path().join("sine/sine_trajectory.csv")), "step,phase,p0,w11,w21,w22,b1,b2,loss");

    let sweep = json!({
        "experiment": "stability_sweep", "output_dir": tmp.path().join("sweep"), "d": 16, "probes": 4,
        "depths": [4, 8, 16], "taus": [0.0, 0.5],
        "variants": [{"name": "res_ln", "residual": true, "layernorm": true, "shared": {"kind": "skew"}}]
    });
    run(&parse(&sweep)).unwrap();
    assert_eq!(header(&tmp.path().join("sweep/stability.csv")), "config_id,ell,norm,psi");
    assert_eq!(header(&tmp.path().join("sweep/gaps.csv")), "config_id,L,tau,loss_full,loss_dropone,gap,bound_rhs");
    let rows = fs::read_to_string(tmp.path().join("sweep/stability.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 2 * (4 + 8 + 16));

    let shared = json!({"experiment": "sharedbase_check", "output_dir": tmp.path().join("shared"), "cases": 10});
    let report = run(&parse(&shared)).unwrap();
    assert!(report.lines[0].starts_with("max discrepancy"));
}

#[test]
fn thread_cap_from_environment() {
    std::env::set_var(runner::THREADS_ENV, "1");
    assert_eq!(runner::worker_count(), 1);
    let out = runner::run_parallel(&[1, 2, 3, 4], |x| x * 10);
    assert_eq!(out, vec![10, 20, 30, 40]);
    std::env::remove_var(runner::THREADS_ENV);
}

#[test]
fn shipped_configs_load_and_validate() {
    let dir = Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"));
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n > 0);
}

#[test]
fn raptr_schedule_not_ending_at_full_depth_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = tiny_boolpoly("raptr", tmp.path(), 1);
    v["schedule"] = json!({"stages": [{"size": 6}, {"size": 11}]});
    let err = ExperimentConfig::from_json(&v.to_string()).unwrap_err();
    assert_eq!(exit_code(&err), EXIT_CONFIG);
}

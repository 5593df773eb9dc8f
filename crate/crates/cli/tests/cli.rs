use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_raptr-lab"));
    c.env("RAPTR_LAB_THREADS", "1");
    c
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_smoke_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin().arg("run").arg(config("boolpoly_smoke.json")).arg("--output-dir").arg(tmp.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("raptr seed 1: final eval loss"));
    for f in ["metrics.csv", "components.csv", "manifest.json"] {
        assert!(tmp.path().join(f).exists(), "{f}");
    }
}

#[test]
fn schedule_report_prints_solved_shift() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin().arg("run").arg(config("schedule_report.json")).arg("--output-dir").arg(tmp.path()).output().unwrap();
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.lines().any(|l| l == "x = 22000"), "{text}");
}

#[test]
fn selftest_passes() {
    let out = bin().arg("selftest").output().unwrap();
    assert!(out.status.success(), "{}", stdout(&out));
    let text = stdout(&out);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 4, "{text}");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"experiment": "schedule_report", "depht": 3}"#).unwrap();
    assert_eq!(bin().arg("run").arg(&bad).output().unwrap().status.code(), Some(2));

    let missing = tmp.path().join("missing.json");
    assert_eq!(bin().arg("run").arg(&missing).output().unwrap().status.code(), Some(2));

    let infeasible = tmp.path().join("infeasible.json");
    let body = format!(
        r#"{{"experiment": "schedule_report", "output_dir": "{}", "depth": 24, "total_steps": 1000,
            "schedule": {{"stages": [{{"size": 6}}, {{"size": 24}}], "mode": "equal", "target_avg": 2}}}}"#,
        tmp.path().join("out").display()
    );
    fs::write(&infeasible, body).unwrap();
    assert_eq!(bin().arg("run").arg(&infeasible).output().unwrap().status.code(), Some(4));

    let diverge = tmp.path().join("diverge.json");
    let body = format!(
        r#"{{"experiment": "boolpoly_train", "method": "baseline", "output_dir": "{}",
            "task": {{"d": 10, "k": 2, "per_degree": 2, "support": 6}}, "model": {{"depth": 4, "hidden": 8}},
            "optimizer": {{"kind": "sgd", "momentum": 0.0}}, "lr": {{"peak_lr": 1e6}},
            "steps": 50, "eval_every": 10, "eval_size": 64, "probe_every": 50, "probe_samples": 64, "final_probe_samples": 64}}"#,
        tmp.path().join("div").display()
    );
    fs::write(&diverge, body).unwrap();
    let out = bin().arg("run").arg(&diverge).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn compare_two_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut dirs = vec![];
    for method in ["baseline", "raptr"] {
        let cfg = tmp.path().join(format!("{method}.json"));
        let dir = tmp.path().join(method);
        let body = format!(
            r#"{{"experiment": "boolpoly_train", "method": "{method}", "output_dir": "{}",
                "task": {{"d": 10, "k": 2, "per_degree": 2, "support": 6}}, "model": {{"depth": 12, "hidden": 8}},
                "steps": 120, "eval_every": 60, "eval_size": 64, "probe_every": 60, "probe_samples": 64, "final_probe_samples": 256}}"#,
            dir.display()
        );
        fs::write(&cfg, body).unwrap();
        assert!(bin().arg("run").arg(&cfg).output().unwrap().status.success());
        dirs.push(dir);
    }
    let table = tmp.path().join("table.csv");
    let out = bin().arg("compare").args(&dirs).arg("--out").arg(&table).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&table).unwrap();
    assert_eq!(text, stdout(&out));
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("run,method,seed,final_eval_loss,flops_ratio,degree_1,degree_2"));

    let one = bin().arg("compare").arg(&dirs[0]).output().unwrap();
    assert!(!one.status.success());
}

mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn clreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clreg")).args(args).output().unwrap()
}

fn write_config(dir: &Path, cfg: &clreg::runner::RunConfig) -> String {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_writes_reports_and_metrics_reads_them_back() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &common::tiny_config());
    let out = dir.path().join("run");
    let o = clreg(&["run", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();

    let o = clreg(&["metrics", "--matrix", out.join("R.csv").to_str().unwrap()]);
    assert!(o.status.success());
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(m["bwt"], summary["bwt"]);
    assert_eq!(m["tasks"], 3);
}

#[test]
fn metrics_accepts_a_baseline_override() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path().join("R.csv");
    fs::write(&r, "phase,task_0,task_1\n0,0.8,0.3\n1,0.6,0.9\n").unwrap();
    let o = clreg(&["metrics", "--matrix", r.to_str().unwrap(), "--baseline", "0.25,0.25"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((m["fwt"].as_f64().unwrap() - 0.05).abs() < 1e-12);
    assert!((m["bwt"].as_f64().unwrap() + 0.2).abs() < 1e-12);
}

#[test]
fn bad_config_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"epochs": 0}"#).unwrap();
    let o = clreg(&[
        "run",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    fs::write(&path, r#"{"epoch": 3}"#).unwrap();
    let o = clreg(&[
        "run",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epoch"));
}

#[test]
fn missing_output_dir_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &common::tiny_config());
    let o = clreg(&["run", "--config", &config]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_config();
    cfg.optimizer = clreg::optim::OptimizerConfig::Sgd { lr: 1e300 };
    let config = write_config(dir.path(), &cfg);
    let o = clreg(&["run", "--config", &config, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn missing_matrix_file_exits_with_code_1() {
    let o = clreg(&["metrics", "--matrix", "/nonexistent/R.csv"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn stream_sweep_shuffle_and_probe_commands() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_config();
    cfg.seeds = vec![0, 1];
    cfg.probe.steps = 20;
    cfg.probe.fisher_sizes = vec![1, 10, 100];
    let config = write_config(dir.path(), &cfg);
    let out = |name: &str| dir.path().join(name).to_str().unwrap().to_string();

    assert!(clreg(&["stream", "--config", &config, "--out", &out("s")])
        .status
        .success());
    assert!(dir.path().join("s/stream").read_dir().unwrap().count() > 0);
    assert!(dir.path().join("s/holdout").read_dir().unwrap().count() > 0);

    let o = clreg(&["sweep", "--config", &config, "--lambdas", "0,1", "--out", &out("w")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("w/sweep.csv")).unwrap();
    // header, one naive row, three strategies x two lambdas
    assert_eq!(csv.lines().count(), 1 + 1 + 6);

    let o = clreg(&["shuffle", "--config", &config, "--n", "2", "--out", &out("h")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("h/shuffle.json").exists());

    for kind in ["fisher", "si-batch", "mas-batch", "interference", "omega"] {
        let o = clreg(&["probe", kind, "--config", &config, "--out", &out("p")]);
        assert!(o.status.success(), "{kind}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for file in [
        "probe_fisher.csv",
        "probe_hessian.csv",
        "probe_si_batch.json",
        "probe_mas_batch.csv",
    ] {
        assert!(dir.path().join("p").join(file).exists(), "{file}");
    }
}

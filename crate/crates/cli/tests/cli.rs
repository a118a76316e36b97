use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn opflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_opflow")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn validate_accepts_shipped_scenarios() {
    for name in ["dense_tp.json", "moe_ep.json", "fuse_norm_comm.json"] {
        let out = opflow(&["validate", "--config", scenario(name).to_str().unwrap()]);
        assert!(out.status.success(), "{name}: {}", stdout(&out));
        assert!(stdout(&out).lines().all(|l| l.starts_with("ok")));
    }
}

#[test]
fn validate_fails_on_missing_labels() {
    let out = opflow(&["validate", "--config", scenario("dense_tp.json").to_str().unwrap(), "--strategy", "dbo"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("FAIL"));
}

#[test]
fn missing_config_is_an_error() {
    let out = opflow(&["run", "--config", "/nonexistent/scenario.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn run_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = scenario("fuse_norm_comm.json");
    for dir in [&a, &b] {
        let out = opflow(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
        assert!(out.status.success());
        assert!(stdout(&out).contains("speedup_vs_sequential"));
    }
    let read = |d: &Path| std::fs::read(d.join("metrics.json")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    let traces = std::fs::read_dir(a.path()).unwrap().filter(|e| {
        e.as_ref().unwrap().file_name().to_string_lossy().starts_with("trace_")
    });
    assert_eq!(traces.count(), 4);
}

#[test]
fn sequential_override_gives_unit_speedup() {
    let dir = tempfile::tempdir().unwrap();
    let out = opflow(&[
        "run",
        "--config",
        scenario("dense_tp.json").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--strategy",
        "sequential",
        "--seed",
        "5",
    ]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("speedup_vs_sequential 1.0000"));
}

#[test]
fn sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = opflow(&[
        "sweep",
        "--config",
        scenario("dense_tp.json").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--axis",
        "lambda",
    ]);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(dir.path().join("sweep_metrics.json").exists());
}

#[test]
fn unknown_axis_is_rejected() {
    let out = opflow(&["sweep", "--config", scenario("dense_tp.json").to_str().unwrap(), "--axis", "heat"]);
    assert!(!out.status.success());
}

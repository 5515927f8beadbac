use std::fs;
use std::path::PathBuf;

use slicesim::runner::{audit_outputs, run_source, sweep, RunnerError};
use slicesim::scenario::{ScenarioError, ScenarioSource};
use slicesim::world::RunOptions;

fn source(name: &str) -> ScenarioSource {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.toml"));
    ScenarioSource::read(&p).unwrap()
}

fn scratch(tag: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("slicesim-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&d);
    d
}

#[test]
fn sweep_writes_one_directory_per_value() {
    let out = scratch("sweep3");
    let values: Vec<String> = ["1", "10", "100"].map(String::from).to_vec();
    let runs = sweep(&source("isolation_rach"), "rach_bursts[0].contenders", &values, RunOptions::default(), &out, true).unwrap();
    assert_eq!(runs.len(), 3);
    let mut dirs: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name()).collect();
    dirs.sort();
    assert_eq!(dirs, ["00_1", "01_10", "02_100"]);
    for (v, r) in runs {
        let a = r.unwrap();
        assert!(a.dir.join("report.json").exists(), "{v}");
        assert!(a.dir.join("report.txt").exists());
        let contenders = a.output.rach.iter().filter(|l| l.outcome.slice == Some(slicesim::ids::SliceNetId(1))).count();
        assert_eq!(contenders.to_string(), v);
    }
    fs::remove_dir_all(out).unwrap();
}

#[test]
fn empty_sweep_runs_nothing() {
    let out = scratch("sweep0");
    let runs = sweep(&source("isolation_rach"), "rach_bursts[0].contenders", &[], RunOptions::default(), &out, false).unwrap();
    assert!(runs.is_empty());
    assert!(!out.exists());
}

#[test]
fn unknown_path_is_named() {
    let err = sweep(&source("isolation_rach"), "rach_bursts[0].nope", &["1".into()], RunOptions::default(), &scratch("bad"), false)
        .unwrap_err();
    match err {
        RunnerError::Scenario(ScenarioError::UnknownPath(p)) => assert!(p.contains("nope")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn audit_detects_tampered_csv() {
    let out = scratch("audit");
    let a = run_source(&source("edge_scaling"), RunOptions::default(), &out, true).unwrap();
    let csv = out.join("metrics.csv");
    let text = fs::read_to_string(&csv).unwrap();
    let tampered = text.replacen("served_bytes,", "served_bytes,1", 1);
    fs::write(&csv, tampered).unwrap();
    assert!(matches!(audit_outputs(&out, &a.summary), Err(RunnerError::AuditMismatch)));
    fs::remove_dir_all(out).unwrap();
}

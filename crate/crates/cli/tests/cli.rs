use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_slicesim"))
}

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.toml"))
}

fn scratch(tag: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("slicesim-cli-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_to(file: &Path, out: &Path, extra: &[&str]) -> Output {
    bin().arg("run").arg(file).arg("--out").arg(out).args(extra).output().unwrap()
}

#[test]
fn bundled_scenarios_validate() {
    for name in ["isolation_rach", "two_level_mac", "slice_onoff", "cu_plane_options", "offload_wearable", "edge_scaling"] {
        let o = bin().arg("validate").arg(scenario(name)).output().unwrap();
        assert!(o.status.success(), "{name}: {}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).starts_with(&format!("ok: {name}")));
    }
}

#[test]
fn dangling_cn_slice_is_reported() {
    let dir = scratch("dangling");
    let text = fs::read_to_string(scenario("cu_plane_options")).unwrap();
    let bad = text.replace(r#""4" = ["health_core"]"#, r#""4" = ["ghost_core"]"#);
    let file = dir.join("bad.toml");
    fs::write(&file, &bad).unwrap();
    let o = bin().arg("validate").arg(&file).output().unwrap();
    assert!(!o.status.success());
    let err = stderr(&o);
    let line = bad.lines().position(|l| l.starts_with("ran_to_cn")).unwrap() + 1;
    assert!(err.contains("ghost_core"), "{err}");
    assert!(err.contains("pairing.ran_to_cn.4"), "{err}");
    assert!(err.contains(&format!("{line}:")), "{err}");
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn overlapping_segments_are_reported() {
    let dir = scratch("overlap");
    let text = fs::read_to_string(scenario("cu_plane_options")).unwrap();
    let bad = text.replace(
        "blocks = [0, 100]\n",
        "blocks = [0, 100]\n[[grid.segments]]\nname = \"extra\"\nblocks = [90, 95]\n",
    );
    let file = dir.join("bad.toml");
    fs::write(&file, bad).unwrap();
    let o = bin().arg("validate").arg(&file).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("'main'") && err.contains("'extra'"), "{err}");
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn same_seed_same_csv() {
    let dir = scratch("det");
    let f = scenario("isolation_rach");
    assert!(run_to(&f, &dir.join("a"), &["--seed", "9"]).status.success());
    assert!(run_to(&f, &dir.join("b"), &["--seed", "9"]).status.success());
    for name in ["metrics.csv", "paths.csv", "report.txt"] {
        let a = fs::read(dir.join("a").join(name)).unwrap();
        let b = fs::read(dir.join("b").join(name)).unwrap();
        assert!(a == b, "{name} differs");
    }
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn zero_duration_writes_header_only() {
    let dir = scratch("zero");
    let o = run_to(&scenario("two_level_mac"), &dir, &["--duration", "0", "--audit"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert_eq!(csv, "time_us,slice_id,node_id,metric,value\n");
    let json: String = fs::read_to_string(dir.join("report.json")).unwrap();
    assert!(json.contains("\"duration_us\": 0"), "{json}");
    assert!(json.contains("\"slices\": []"), "{json}");
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn sweep_three_values() {
    let dir = scratch("sweep");
    let o = bin()
        .arg("sweep")
        .arg(scenario("cu_plane_options"))
        .args(["--param", "ran.cu_plane", "--values", "option1,option2,option3", "--out"])
        .arg(&dir)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let mut names: Vec<_> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["00_option1", "01_option2", "02_option3"]);
    for n in names {
        assert!(dir.join(n).join("report.json").exists());
    }
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn empty_sweep_is_a_no_op() {
    let dir = scratch("empty");
    let out = dir.join("out");
    let o = bin()
        .arg("sweep")
        .arg(scenario("cu_plane_options"))
        .args(["--param", "ran.cu_plane", "--values", "", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("nothing to run"));
    assert!(!out.exists());
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn unknown_sweep_path_is_named() {
    let dir = scratch("badpath");
    let o = bin()
        .arg("sweep")
        .arg(scenario("cu_plane_options"))
        .args(["--param", "ran.nonexistent_knob", "--values", "1,2", "--out"])
        .arg(&dir)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ran.nonexistent_knob"), "{}", stderr(&o));
    assert_eq!(fs::read_dir(&dir).unwrap().count(), 0);
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn missing_file_fails() {
    let o = bin().arg("validate").arg("/nonexistent/scenario.toml").output().unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/nonexistent/scenario.toml"), "{}", stderr(&o));
}

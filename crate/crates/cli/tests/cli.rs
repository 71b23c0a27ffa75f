use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use owcl_core::driver::ExperimentMode;
use owcl_core::verify::tiny_config;

fn owcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_owcl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_tiny(dir: &Path, name: &str, mode: ExperimentMode) -> String {
    let mut cfg = tiny_config(12);
    cfg.mode = mode;
    let path = dir.join(name);
    fs::write(&path, cfg.to_json()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn missing_config_exits_2_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = owcl(&["run", "--config", "/no/such/file.json", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn invalid_config_exits_2_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"stages": 3, "epoch": 2}"#).unwrap();
    let out = tmp.path().join("run");
    let o = owcl(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epoch"));
    assert!(!out.exists());
}

#[test]
fn run_writes_artifacts_and_resume_matches() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path(), "tiny.json", ExperimentMode::Dparl);
    let out = tmp.path().join("run");
    let o = owcl(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.json", "manifest.json", "metrics.csv", "summary.json", "stage_1.owcl", "stage_3.owcl"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "stage,R_n");
    assert_eq!(lines.len(), 4);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(summary["R_N"].is_f64() && summary["F_N"].is_f64());

    let resumed = tmp.path().join("resumed");
    let o = owcl(&[
        "run",
        "--resume",
        out.join("stage_1.owcl").to_str().unwrap(),
        "--out",
        resumed.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(resumed.join("stage_3.owcl")).unwrap(), fs::read(out.join("stage_3.owcl")).unwrap());
    assert_eq!(
        fs::read_to_string(resumed.join("summary.json")).unwrap(),
        fs::read_to_string(out.join("summary.json")).unwrap()
    );

    let o = owcl(&["report", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("R_N"));
}

#[test]
fn seed_flag_changes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path(), "tiny.json", ExperimentMode::Dparl);
    let a = tmp.path().join("a");
    let o = owcl(&["run", "--config", &cfg, "--out", a.to_str().unwrap(), "--seed", "77"]);
    assert!(o.status.success());
    let snap: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(snap["seed"], 77);
}

#[test]
fn upper_bound_is_a_single_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path(), "upper.json", ExperimentMode::UpperBound);
    let out = tmp.path().join("run");
    let o = owcl(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count(), 2);
    assert!(!out.join("stage_2.owcl").exists());
}

#[test]
fn stage_order_ablation_emits_four_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path(), "tiny.json", ExperimentMode::Dparl);
    let out = tmp.path().join("abl");
    let o = owcl(&["ablate", "--kind", "stage_order", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let names: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(csv.lines().next().unwrap(), "variant,R_N,F_N");
    assert_eq!(names, ["none", "fifo", "filo", "random"]);
    for n in names {
        assert!(out.join(n).join("summary.json").exists());
    }
    let o = owcl(&["report", "--out", out.to_str().unwrap()]);
    assert!(stdout(&o).contains("filo"));
}

#[test]
fn unknown_ablation_kind_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path(), "tiny.json", ExperimentMode::Dparl);
    let out = tmp.path().join("abl");
    let o = owcl(&["ablate", "--kind", "depth", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn verify_filters_and_names_failures() {
    let o = owcl(&["verify", "--only", "param_counts"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("PASS param_counts"));
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).count(), 1);

    let o = owcl(&["verify", "--only", "zero_init", "--mutate", "lora_nonzero_init"]);
    assert!(!o.status.success());
    assert!(stdout(&o).contains("FAIL zero_init"));

    let o = owcl(&["verify", "--only", "no_such_property"]);
    assert_eq!(o.status.code(), Some(2));
}

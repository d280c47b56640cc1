use std::path::Path;
use std::process::{Command, Output};

fn icuda(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icuda")).current_dir(dir).args(args).output().expect("binary runs")
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn gen_writes_manifest_and_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let out = icuda(dir.path(), &["gen", "--out", "o", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0));
    let manifest = json(&out);
    assert_eq!(manifest["seeds"], serde_json::json!([3]));
    assert!(dir.path().join("o/data/seed_3.csv").exists());
    assert!(dir.path().join("o/data/manifest.json").exists());
}

#[test]
fn gen_then_verify_and_run_succeed() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(icuda(dir.path(), &["gen", "--out", "o"]).status.code(), Some(0));
    for algo in ["iwl", "dann", "icuda"] {
        let out = icuda(dir.path(), &["verify", "--out", "o", "--algo", algo]);
        assert_eq!(out.status.code(), Some(0), "{algo}: {}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(json(&out)["all_pass"], serde_json::Value::Bool(true));
    }
    let run = icuda(dir.path(), &["run", "--out", "o"]);
    assert_eq!(run.status.code(), Some(0));
    assert!(dir.path().join("o/results.json").exists());
    assert!(dir.path().join("o/accuracy.csv").exists());
}

#[test]
fn describe_reports_depth() {
    let dir = tempfile::tempdir().unwrap();
    let out = icuda(dir.path(), &["describe", "--algo", "dann"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(json(&out)["depth"].as_u64().unwrap() > 0);
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(icuda(dir.path(), &["verify", "--out", "missing"]).status.code(), Some(2));
    assert_eq!(icuda(dir.path(), &["gen", "--algo", "svm"]).status.code(), Some(2));
    assert_eq!(icuda(dir.path(), &["frobnicate"]).status.code(), Some(2));
    std::fs::write(dir.path().join("bad.json"), "{ not json").unwrap();
    assert_eq!(icuda(dir.path(), &["gen", "--config", "bad.json"]).status.code(), Some(2));
    std::fs::write(dir.path().join("neg.json"), r#"{"seeds": []}"#).unwrap();
    assert_eq!(icuda(dir.path(), &["gen", "--config", "neg.json"]).status.code(), Some(2));
}

#[test]
fn infeasible_build_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"algorithm": "dann", "dann": {"steps": 1, "act_tol": 1e-5, "gamma_tol": 1e-4, "prod_terms": 2,
        "prod_seed": 0, "proj_dirs": 2, "proj_levels": 1, "out_slot": "y"}, "out_dir": "o"}"#;
    std::fs::write(dir.path().join("c.json"), cfg).unwrap();
    assert_eq!(icuda(dir.path(), &["gen", "--config", "c.json"]).status.code(), Some(0));
    assert_eq!(icuda(dir.path(), &["verify", "--config", "c.json"]).status.code(), Some(1));
}

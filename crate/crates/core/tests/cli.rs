use std::path::PathBuf;
use std::process::{Command, Output};

use branchlab::fixtures;
use branchlab::model::Mechanism;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(format!("{name}.json"))
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_branchlab"))
        .args(args)
        .env_remove("BRANCHLAB_WORKERS")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn fixture_files_match_the_builtin_models() {
    for (name, m) in fixtures::all() {
        let text = std::fs::read_to_string(fixture(name)).unwrap();
        let loaded = Mechanism::from_json(&text).unwrap();
        assert_eq!(loaded.content_hash(), m.content_hash(), "{name}");
    }
}

#[test]
fn validate_reports_perron_root() {
    let o = run(&[
        "validate",
        "--model",
        fixture("fix1").to_str().unwrap(),
        "--json",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((v["lambda1"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn classify_large_regime() {
    let o = run(&[
        "classify",
        "--model",
        fixture("fix4").to_str().unwrap(),
        "--f",
        "1,-1",
        "--json",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("Large"), "{text}");
}

#[test]
fn predict_emits_json() {
    let o = run(&[
        "predict",
        "--model",
        fixture("fix3").to_str().unwrap(),
        "--f",
        "1,-1",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v.is_object());
}

#[test]
fn usage_errors_exit_two() {
    let missing = run(&["validate", "--model", "/nonexistent/model.json"]);
    assert_eq!(missing.status.code(), Some(2));
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&missing.stderr).trim()).unwrap();
    assert_eq!(err["exit"], 2);

    let bad_suite = run(&[
        "verify",
        "--model",
        fixture("fix1").to_str().unwrap(),
        "--suite",
        "bogus",
    ]);
    assert_eq!(bad_suite.status.code(), Some(2));

    let bad_f = run(&[
        "classify",
        "--model",
        fixture("fix2").to_str().unwrap(),
        "--f",
        "1,2,3",
    ]);
    assert_eq!(bad_f.status.code(), Some(2));
}

#[test]
fn simulate_writes_ensemble_and_is_worker_independent() {
    let tmp = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for w in ["1", "3"] {
        let out = tmp.path().join(w);
        let o = run(&[
            "simulate",
            "--model",
            fixture("fix2").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--replicas",
            "50",
            "--horizon",
            "1",
            "--dt",
            "0.01",
            "--record",
            "0.5,1",
            "--workers",
            w,
        ]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
        assert!(out.join("manifest.json").exists());
        csvs.push(std::fs::read_to_string(out.join("ensemble.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    let mut lines = csvs[0].lines();
    assert_eq!(lines.next(), Some("replica,time,type_1,type_2,W"));
    assert_eq!(lines.count(), 100);
}

#[test]
fn verify_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("lln");
    let o = run(&[
        "verify",
        "--model",
        fixture("fix1").to_str().unwrap(),
        "--suite",
        "lln",
        "--replicas",
        "2000",
        "--dt",
        "0.005",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(matches!(o.status.code(), Some(0) | Some(1)));
    let csv = std::fs::read_to_string(out.join("lln.csv")).unwrap();
    assert!(csv.starts_with("experiment,quantity,time,empirical,stderr,predicted,pass\n"));

    let r = run(&["report", out.to_str().unwrap(), "--json"]);
    assert_eq!(r.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&r)).unwrap();
    assert!(v.as_array().map(|a| !a.is_empty()).unwrap_or(false), "{v}");
}

use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn lanton(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lanton"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn error_json(out: &Output) -> Value {
    assert!(!out.status.success());
    serde_json::from_slice(&out.stderr).expect("stderr is one JSON object")
}

fn write_config(dir: &Path, name: &str, v: Value) -> String {
    let p = dir.join(name);
    std::fs::write(&p, v.to_string()).unwrap();
    p.display().to_string()
}

fn quad_config(kind: &str) -> Value {
    json!({
        "task": {"kind": "quadratic", "preset": "hetero_hidden", "target_scale": 0.05},
        "optimizer": {"kind": kind, "noise_option": "II", "noise_update_interval": 1},
        "seeds": [0, 1, 2],
        "total_steps": 200,
    })
}

#[test]
fn run_compare_diagnose_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let la = d.join("la").display().to_string();
    let fx = d.join("fx").display().to_string();
    let cfg_la = write_config(d, "la.json", quad_config("lanton"));
    let cfg_fx = write_config(d, "fx.json", quad_config("fixed_rate_lmo"));
    assert!(lanton(&["run", &cfg_la, "--out", &la]).status.success());
    assert!(lanton(&["run", &cfg_fx, "--out", &fx]).status.success());
    for k in 0..3 {
        assert!(d.join("la").join(format!("seed_{k}.csv")).exists());
    }

    let out = lanton(&["compare", &la, &fx, "--threshold", "0.02"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cmp: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cmp["runs"].as_array().unwrap().len(), 2);

    let out = lanton(&["diagnose", &la]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let diag: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(diag.as_array().unwrap().len(), 3);
    assert!(d.join("la").join("diagnostics.json").exists());
}

#[test]
fn seed_override_replaces_seed_list() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out_dir = d.join("o").display().to_string();
    let cfg = write_config(d, "c.json", quad_config("lanton"));
    let out = lanton(&["run", &cfg, "--out", &out_dir, "--seed-override", "7,9"]);
    assert!(out.status.success());
    let seeds: Value = serde_json::from_slice(&out.stdout).unwrap();
    let got: Vec<u64> = seeds
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["seed"].as_u64().unwrap())
        .collect();
    assert_eq!(got, vec![7, 9]);
}

#[test]
fn sweep_writes_one_directory_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut base = quad_config("lanton");
    base["total_steps"] = json!(50);
    base["seeds"] = json!([0]);
    let cfg = write_config(d, "c.json", base);
    let grid = write_config(
        d,
        "g.json",
        json!({"optimizer.alpha": [0.01, 0.1], "optimizer.beta2": [0.9, 0.99]}),
    );
    let out_dir = d.join("sw").display().to_string();
    let out = lanton(&["sweep", &cfg, "--grid", &grid, "--out", &out_dir]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let points: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(points.as_array().unwrap().len(), 4);
    assert!(d.join("sw").join("point_003").join("summary.json").exists());
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut bad = quad_config("lanton");
    bad["optimizer"]["beta2"] = json!(1.5);
    let cfg = write_config(dir.path(), "bad.json", bad);
    let err = error_json(&lanton(&["run", &cfg]));
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("optimizer.beta2"));
}

#[test]
fn missing_file_and_bad_usage_report_json() {
    let err = error_json(&lanton(&["run", "/nonexistent/config.json"]));
    assert_eq!(err["error"], "io");
    let err = error_json(&lanton(&["compare", "only_one_dir", "--threshold", "1"]));
    assert_eq!(err["error"], "usage");
    assert!(lanton(&["--help"]).status.success());
}

#[test]
fn compare_rejects_mismatched_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut other = quad_config("lanton");
    other["task"]["target_scale"] = json!(0.5);
    let a = d.join("a").display().to_string();
    let b = d.join("b").display().to_string();
    let ca = write_config(d, "a.json", quad_config("lanton"));
    let cb = write_config(d, "b.json", other);
    assert!(lanton(&["run", &ca, "--out", &a]).status.success());
    assert!(lanton(&["run", &cb, "--out", &b]).status.success());
    let err = error_json(&lanton(&["compare", &a, &b, "--threshold", "0.1"]));
    assert!(!err["message"].as_str().unwrap().is_empty());
}

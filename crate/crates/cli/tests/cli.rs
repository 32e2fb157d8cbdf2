//! End-to-end runs of the `middev` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_middev"));
    c.env_remove("MIDDEV_OUT");
    c
}

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().unwrap()
}

fn cfg(name: &str) -> String {
    configs().join(name).to_string_lossy().into_owned()
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(64));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn bad_flag_is_usage_error() {
    let out = bin().args(["simulate", "--threads", "many"]).output().unwrap();
    assert_eq!(out.status.code(), Some(64));
}

#[test]
fn help_exits_zero() {
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));
}

#[test]
fn missing_config_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["simulate", "--config", "/nonexistent/cfg.json"], dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn invalid_model_is_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let text = fs::read_to_string(cfg("case1.json")).unwrap().replace("-1.0,\n  \"gamma2\"", "1.0,\n  \"gamma2\"");
    fs::write(&path, text).unwrap();
    let o = run(&["simulate", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn validate_params_power_law_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["validate-params", "--config", &cfg("power_law.json")], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = fs::read_to_string(dir.path().join("conditions.csv")).unwrap();
    for name in ["a_n_diverges", "n_over_a6_kappa_pow", "n_over_a2_kappa_pow"] {
        let line = text.lines().find(|l| l.starts_with(name)).unwrap();
        assert!(line.contains(",true,"), "{line}");
    }
}

#[test]
fn validate_params_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["validate-params", "--config", &cfg("case1.json")], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn identities_hold_and_csv_lists_all() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &["identities", "--config", &cfg("case1.json"), "--seed", "7", "--n", "10000"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let mut rdr = csv::Reader::from_path(dir.path().join("identities.csv")).unwrap();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let rel: f64 = rec[4].parse().unwrap();
        assert!(rel <= 1e-9, "{rec:?}");
        rows += 1;
    }
    assert_eq!(rows, 10);
}

#[test]
fn env_overrides_out_flag() {
    let env_dir = tempfile::tempdir().unwrap();
    let flag_dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["simulate", "--config", &cfg("case1.json"), "--n", "20", "--out"])
        .arg(flag_dir.path())
        .env("MIDDEV_OUT", env_dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(env_dir.path().join("trajectory.csv").exists());
    assert!(!flag_dir.path().join("trajectory.csv").exists());
}

#[test]
fn manifest_lists_existing_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &["concentration", "--config", &cfg("case2.json"), "--replicas", "4", "--n", "500"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("concentration.manifest.json")).unwrap()).unwrap();
    let outputs = m["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 3);
    for p in outputs {
        assert!(Path::new(p.as_str().unwrap()).exists());
    }
    assert_eq!(m["exit_code"], 0);
}

#[test]
fn json_format_round_trips_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &["estimate", "--config", &cfg("case1.json"), "--format", "json", "--n", "200"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("estimate.json")).unwrap()).unwrap();
    let d = v["d_hat"].as_f64().unwrap();
    assert!((0.0..=4.0).contains(&d));
}

#[test]
fn config_round_trip_is_value_identical() {
    for name in ["case1.json", "case2.json", "power_law.json", "tailslope.json"] {
        let text = fs::read_to_string(cfg(name)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let back: serde_json::Value = if v.get("model").is_some() {
            let c: middev_core::harness::ExperimentConfig = serde_json::from_value(v.clone()).unwrap();
            serde_json::to_value(c).unwrap()
        } else {
            let c: middev_core::params::ModelConfig = serde_json::from_value(v.clone()).unwrap();
            serde_json::to_value(c).unwrap()
        };
        assert_eq!(back, v, "{name}");
    }
}

#[test]
fn report_collects_manifests() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["rates", "--config", &cfg("case1.json")], dir.path()).status.code(), Some(0));
    assert_eq!(run(&["report"], dir.path()).status.code(), Some(0));
    let md = fs::read_to_string(dir.path().join("report.md")).unwrap();
    assert!(md.contains("| rates | rates | 0 |"));
}

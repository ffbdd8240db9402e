use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn umdlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_umdlab"))
        .args(args)
        .env_remove("UMDLAB_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn golden(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    fs::read_to_string(path).expect("golden file exists")
}

#[test]
fn identities_pass_at_depth_six() {
    let out = umdlab(&["identities", "--depth", "6", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["status"], "pass");
    let ids = v["result"]["identities"].as_array().unwrap();
    assert_eq!(ids.len(), 10);
    assert!(ids.iter().all(|i| i["status"] == "pass"));
    assert_eq!(String::from_utf8(out.stdout).unwrap(), golden("identities.json"));
}

#[test]
fn series_bound_divergent_is_a_verdict() {
    let out = umdlab(&["series-bound", "--delta", "0.5"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(&out)["result"]["verdict"], "divergent");
    assert_eq!(String::from_utf8(out.stdout).unwrap(), golden("series-bound.json"));
}

#[test]
fn schur_check_is_byte_identical() {
    let args = ["schur-check", "--k", "3", "--trials", "100", "--seed", "7"];
    let a = umdlab(&args);
    let b = Command::new(env!("CARGO_BIN_EXE_umdlab"))
        .args(args)
        .env("RAYON_NUM_THREADS", "3")
        .env_remove("UMDLAB_OUT_DIR")
        .output()
        .unwrap();
    assert_eq!(a.status.code(), Some(0));
    assert!(!a.stdout.is_empty());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn report_embeds_config_and_schema() {
    let out = umdlab(&["lambda-equivalence", "--k", "2", "--trials", "5", "--seed", "3"]);
    let v = json(&out);
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["study"], "lambda-equivalence");
    assert_eq!(v["config"]["seed"], 3);
    assert_eq!(v["config"]["trials"], 5);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(umdlab(&["schur-check", "--bogus"]).status.code(), Some(1));
    assert_eq!(umdlab(&["no-such-study"]).status.code(), Some(1));
    assert_eq!(umdlab(&[]).status.code(), Some(1));
    assert_eq!(umdlab(&["identities", "--depth", "x"]).status.code(), Some(1));
    // Above the exact-arithmetic depth cap.
    let out = umdlab(&["identities", "--depth", "20"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cap"));
    assert_eq!(umdlab(&["umd-probe", "--p", "1"]).status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    assert_eq!(umdlab(&["--help"]).status.code(), Some(0));
    assert_eq!(umdlab(&["scaling-study", "--help"]).status.code(), Some(0));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# series run\ndelta = 0.5\nk-max = 20\nformat = json\n").unwrap();
    let out = umdlab(&["series-bound", "--config", cfg.to_str().unwrap(), "--delta", "0.75"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["config"]["delta"], 0.75);
    assert_eq!(v["config"]["k_max"], 20);
    assert_eq!(v["result"]["verdict"], "convergent");
}

#[test]
fn unknown_config_key_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "seed = 4\nwidth = 3\n").unwrap();
    let out = umdlab(&["series-bound", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("width"));
    assert!(out.stdout.is_empty());
}

#[test]
fn mismatched_subcommand_in_config_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("other.cfg");
    fs::write(&cfg, "subcommand = umd-probe\n").unwrap();
    let out = umdlab(&["series-bound", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn out_file_and_env_directory() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("nested/series.csv");
    let out = umdlab(&["series-bound", "--format", "csv", "--out", file.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());
    let csv = fs::read_to_string(&file).unwrap();
    assert!(csv.starts_with("k,partial_sum\n"));
    assert_eq!(csv.lines().count(), 62);

    let out = Command::new(env!("CARGO_BIN_EXE_umdlab"))
        .args(["series-bound", "--delta", "0.6"])
        .env("UMDLAB_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("series-bound.json")).unwrap()).unwrap();
    assert_eq!(v["result"]["verdict"], "convergent");
}

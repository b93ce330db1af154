use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_xformlab"))
}

fn write_manifest(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn run(path: &Path) -> Output {
    bin().arg("run").arg(path).output().unwrap()
}

fn forward(out: &str) -> Value {
    json!({
        "kind": "forward",
        "parameters": {"grid": {"n": 32, "m": 32, "horizon": 0.5}, "p": 1.0, "mode": 1, "tolerance": 1e-3},
        "output_dir": out
    })
}

#[test]
fn forward_mode_passes_and_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_manifest(tmp.path(), "f.json", &forward("out"));
    let output = run(&path);
    assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stderr));
    let out = tmp.path().join("out");
    let s = summary(&out);
    assert_eq!(s["status"], "pass");
    assert_eq!(s["pass"], true);
    for name in ["trace.csv", "trace.svg", "summary.json"] {
        assert!(out.join(name).is_file(), "{name}");
        assert!(s["artifacts"].as_array().unwrap().iter().any(|a| a == name));
    }
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 34);
}

#[test]
fn tight_tolerance_fails_checks_with_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let mut m = forward("out");
    m["parameters"]["tolerance"] = json!(1e-12);
    let output = run(&write_manifest(tmp.path(), "f.json", &m));
    assert_eq!(output.status.code(), Some(1));
    let s = summary(&tmp.path().join("out"));
    assert_eq!(s["status"], "checks_failed");
    let reason: Value = serde_json::from_str(String::from_utf8_lossy(&output.stderr).trim()).unwrap();
    assert_eq!(reason["status"], "checks_failed");
}

#[test]
fn equal_potentials_give_vanishing_kernel() {
    let tmp = tempfile::tempdir().unwrap();
    let m = json!({
        "kind": "kernel",
        "parameters": {"n": 32, "a": "(1+x)*(1+x)", "p": "cos(3*x)", "q": "cos(3*x)"},
        "output_dir": "k"
    });
    let output = run(&write_manifest(tmp.path(), "k.json", &m));
    assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stderr));
    let s = summary(&tmp.path().join("k"));
    let check = s["checks"].as_array().unwrap().iter().find(|c| c["name"] == "vanishes_for_equal_potentials").unwrap();
    assert_eq!(check["pass"], true);
    assert!(check["value"].as_f64().unwrap() <= 1e-12);
}

#[test]
fn desk_fixture_reconstruction_meets_threshold() {
    let tmp = tempfile::tempdir().unwrap();
    let m = json!({"kind": "reconstruct", "parameters": {"fixture": "positive_initial"}, "output_dir": "r"});
    let output = run(&write_manifest(tmp.path(), "r.json", &m));
    assert_eq!(output.status.code(), Some(0));
    let out = tmp.path().join("r");
    let s = summary(&out);
    assert!(s["metrics"]["relative_l2_error"].as_f64().unwrap() <= 0.05);
    for name in ["profile.csv", "profile.svg", "history.csv", "history.svg", "data.csv"] {
        assert!(out.join(name).is_file(), "{name}");
    }
}

#[test]
fn validation_errors_exit_two_and_still_write_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let m = json!({
        "kind": "forward",
        "parameters": {"grid": {"n": 32}, "p": "sin("},
        "output_dir": "bad"
    });
    let output = run(&write_manifest(tmp.path(), "bad.json", &m));
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert_eq!(stderr.trim().lines().count(), 1);
    let reason: Value = serde_json::from_str(stderr.trim()).unwrap();
    assert!(reason["reason"].as_str().unwrap().starts_with("p:"), "{reason}");
    let s = summary(&tmp.path().join("bad"));
    assert_eq!(s["status"], "validation_error");
    assert_eq!(s["pass"], false);

    let validate = bin().arg("validate").arg(tmp.path().join("bad.json")).output().unwrap();
    assert_eq!(validate.status.code(), Some(2));
    let unknown = write_manifest(tmp.path(), "u.json", &json!({"kind": "nope", "parameters": {}, "output_dir": "u"}));
    assert_eq!(run(&unknown).status.code(), Some(2));
    assert!(tmp.path().join("u/summary.json").is_file());
}

#[test]
fn numerical_failure_exits_three_with_stage() {
    let tmp = tempfile::tempdir().unwrap();
    // a decreasing diffusion violates the marching mesh condition
    let m = json!({
        "kind": "kernel",
        "parameters": {"n": 32, "a": "2-x", "p": 0, "q": 1},
        "output_dir": "k"
    });
    let output = run(&write_manifest(tmp.path(), "k.json", &m));
    assert_eq!(output.status.code(), Some(3));
    let s = summary(&tmp.path().join("k"));
    assert_eq!(s["status"], "numerical_failure");
    assert_eq!(s["failing_stage"], "solve");
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let m = json!({
        "kind": "distinguish",
        "parameters": {"grid": {"n": 32, "m": 32}, "b": "sin(3.141592653589793*x)", "p": 0, "q": 1},
        "output_dir": "d"
    });
    let path = write_manifest(tmp.path(), "d.json", &m);
    let read = |dir: &Path| {
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
            .unwrap()
            .flatten()
            .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
            .collect();
        files.sort();
        files
    };
    assert_eq!(run(&path).status.code(), Some(0));
    let first = read(&tmp.path().join("d"));
    assert_eq!(run(&path).status.code(), Some(0));
    assert_eq!(first, read(&tmp.path().join("d")));
}

#[test]
fn batch_reports_worst_status_and_rejects_shared_output() {
    let tmp = tempfile::tempdir().unwrap();
    write_manifest(tmp.path(), "a.json", &forward("a"));
    let mut failing = forward("b");
    failing["parameters"]["tolerance"] = json!(1e-12);
    write_manifest(tmp.path(), "b.json", &failing);
    let output = bin().arg("batch").arg(tmp.path()).env("XFORMLAB_THREADS", "2").output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&output.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].ends_with("a.json pass"), "{stdout}");
    assert!(lines[1].ends_with("b.json checks_failed"), "{stdout}");

    write_manifest(tmp.path(), "c.json", &forward("a"));
    let output = bin().arg("batch").arg(tmp.path()).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("a.json validation_error") && stdout.contains("c.json validation_error"), "{stdout}");
}

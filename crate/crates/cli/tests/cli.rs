use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cop"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("run cop")
}

fn ok_json(out: Output) -> Value {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

const SMALL: &[&str] = &["--grid", "48", "--cells", "10", "--types", "2", "--channels", "16"];

fn synth(dir: &Path, scenes: &str, seed: &str) -> Value {
    let mut args = vec!["synth", "--out", dir.to_str().unwrap(), "--scenes", scenes, "--seed", seed];
    args.extend_from_slice(SMALL);
    ok_json(cop(&args))
}

#[test]
fn synth_writes_scene_files() {
    let dir = tempfile::tempdir().unwrap();
    let v = synth(dir.path(), "2", "5");
    assert_eq!(v["scenes"], serde_json::json!(["synth-0005", "synth-0006"]));
    for ext in ["fh.npy", "fl.npy", "gt.png", "types.json", "manifest.json"] {
        assert!(dir.path().join(format!("synth-0005.{ext}")).exists(), "{ext}");
    }
}

#[test]
fn propagate_with_simulated_and_explicit_clicks() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "1", "3");
    let p = |ext: &str| dir.path().join(format!("synth-0003.{ext}")).to_str().unwrap().to_string();
    let out = dir.path().join("out");
    let v = ok_json(cop(&[
        "propagate",
        "--fh",
        &p("fh.npy"),
        "--fl",
        &p("fl.npy"),
        "--gt",
        &p("gt.png"),
        "--types",
        &p("types.json"),
        "--simulate",
        "per_type",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(v["clicks"], 2);
    assert!(v["metrics"]["point_recall"].as_f64().unwrap() > 0.5, "{v}");
    assert!(out.join("points.json").exists());
    assert!(out.join("pred.png").exists());

    let v = ok_json(cop(&["propagate", "--fh", &p("fh.npy"), "--fl", &p("fl.npy"), "--click", "10,12,0"]));
    assert_eq!(v["clicks"], 1);
    assert!(v["metrics"].is_null());
    assert!(v["types"][0]["points"].as_u64().unwrap() >= 1);
}

#[test]
fn propagate_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "1", "3");
    let p = |ext: &str| dir.path().join(format!("synth-0003.{ext}")).to_str().unwrap().to_string();
    let out = cop(&["propagate", "--fh", &p("fh.npy"), "--fl", &p("fl.npy"), "--click", "1,2"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("x,y,type"));

    let out = cop(&["propagate", "--fh", &p("fh.npy"), "--fl", &p("fl.npy"), "--click", "5000,1,0"]);
    assert!(!out.status.success());

    let out = cop(&["propagate", "--fh", &p("fh.npy"), "--fl", &p("fl.npy")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no clicks"));

    let out = cop(&["propagate", "--fh", &p("fh.npy"), "--fl", &p("gt.png"), "--click", "1,1,0"]);
    assert!(!out.status.success());
}

#[test]
fn evaluate_directory_and_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "2", "11");
    let out = dir.path().join("run");
    let v = ok_json(cop(&[
        "evaluate",
        "--dataset",
        data.to_str().unwrap(),
        "--max-iterations",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(v["scenes"], 2);
    assert!(out.join("report.json").exists());
    assert!(out.join("scenes.csv").exists());

    // The written config reproduces the run.
    let again = ok_json(cop(&["evaluate", "--config", out.join("config.json").to_str().unwrap()]));
    assert_eq!(again["mean"], v["mean"]);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"options": {"chain": {"max_iteration": 3}}}"#).unwrap();
    let out = cop(&["evaluate", "--config", bad.to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn ablate_sweeps_axes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("abl");
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, r#"{"grid_rows": 48, "grid_cols": 48, "cells": 8, "types": 2, "channels": 16}"#).unwrap();
    let v = ok_json(cop(&[
        "ablate",
        "--synthetic",
        "2",
        "--scene-spec",
        spec.to_str().unwrap(),
        "--axis-max-iterations",
        "0,10",
        "--axis-selection",
        "farthest,closest",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(v.as_array().unwrap().len(), 4);
    assert!(out.join("summary.csv").exists());

    let out = cop(&["ablate", "--synthetic", "1", "--scene-spec", spec.to_str().unwrap()]);
    assert!(!out.status.success(), "empty axes must be rejected");
}

#[test]
fn env_vars_fill_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cop"))
        .args(["synth", "--grid", "32", "--cells", "4", "--types", "1", "--channels", "8"])
        .env("COP_OUT", dir.path())
        .env("COP_SEED", "42")
        .output()
        .unwrap();
    let v = ok_json(out);
    assert_eq!(v["scenes"][0], "synth-0042");
}

#[test]
fn extract_reports_command_failure() {
    let dir = tempfile::tempdir().unwrap();
    let image = dir.path().join("img.png");
    std::fs::write(&image, b"not really a png").unwrap();
    let out = cop(&[
        "extract",
        "--command",
        "false {image} {fh} {fl}",
        "--image",
        image.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!out.status.success());
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn dfq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfq"))
        .args(args)
        .env("DFQ_DATA_DIR", data_root())
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dfq(args);
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "dfq {args:?} failed\nstdout: {stdout}\nstderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_lists_every_verb() {
    let help = ok(&["--help"]);
    for verb in [
        "train-teacher",
        "train-generator",
        "generate",
        "ptq",
        "qat",
        "evaluate",
        "run-plan",
        "export-stats",
        "export-grid",
    ] {
        assert!(help.contains(verb), "missing {verb} in help");
    }
}

#[test]
fn unsupported_bit_width_is_rejected() {
    let out = dfq(&["ptq", "--teacher", "t.safetensors", "--bits", "4", "--out", "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bits"));
}

#[test]
fn data_free_qat_requires_generator() {
    let out = dfq(&["qat", "--mode", "data-free", "--student-from", "t.safetensors", "--out", "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--generator"));
}

#[test]
fn missing_dataset_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dfq"))
        .args(["train-teacher", "--epochs", "1", "--out"])
        .arg(dir.path().join("t.safetensors"))
        .env("DFQ_DATA_DIR", dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("SHA256SUMS"));

    let out = dfq(&["train-teacher", "--dataset", "imagenet", "--out", "x.safetensors"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("supported datasets"));
}

#[test]
fn preset_plan_prints_valid_json() {
    let text = ok(&["run-plan", "--preset", "mnist-desk", "--print-preset"]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(v["cells"].as_array().is_some_and(|c| !c.is_empty()));
}

#[test]
fn tiny_end_to_end_flow() {
    if !data_root().join("mnist-lite/SHA256SUMS").exists() {
        eprintln!("skipping: mnist-lite not present");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let teacher = d.join("teacher.safetensors");
    ok(&["train-teacher", "--epochs", "1", "--train-limit", "512", "--out", s(&teacher)]);

    let gdir = d.join("gen");
    let small = ["--epochs", "1", "--batches-per-epoch", "2", "--batch-size", "16"];
    let mut args = vec!["train-generator", "--teacher", s(&teacher), "--out", s(&gdir)];
    args.extend(small);
    ok(&args);
    let gen = gdir.join("generator.safetensors");
    assert!(gdir.join("generator.adam.safetensors").exists());
    assert!(gdir.join("report.csv").exists());

    let ptq = d.join("ptq.safetensors");
    let out = ok(&["ptq", "--teacher", s(&teacher), "--generator", s(&gen), "--samples", "64", "--out", s(&ptq)]);
    assert!(out.contains("DF-PTQ INT8"), "{out}");

    let qdir = d.join("qat");
    let mut args = vec![
        "qat", "--mode", "data-free", "--student-from", s(&teacher), "--generator", s(&gen), "--bits", "6", "--samples", "64",
        "--out", s(&qdir),
    ];
    args.extend(small);
    ok(&args);
    let student = qdir.join("student.safetensors");
    assert!(qdir.join("report.csv").exists());

    let a = ok(&["evaluate", "--model", s(&student)]);
    let b = ok(&["evaluate", "--model", s(&student)]);
    assert_eq!(a, b);
    assert!(a.contains("top-1"));

    let samples = d.join("samples.safetensors");
    ok(&["generate", "--generator", s(&gen), "--teacher", s(&teacher), "--n", "20", "--out", s(&samples)]);
    assert!(samples.exists());

    let stats = d.join("stats.json");
    ok(&["export-stats", "--teacher", s(&teacher), "--out", s(&stats)]);
    let rows: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&stats).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    assert!(!rows.is_empty());
    for key in ["layer", "channel", "mean", "variance"] {
        assert!(rows[0].get(key).is_some(), "row lacks {key}");
    }

    let grid = d.join("grid.png");
    ok(&["export-grid", "--generator", s(&gen), "--teacher", s(&teacher), "--classes", "0,1,2", "--per-class", "4", "--out", s(&grid)]);
    assert!(grid.exists());
}

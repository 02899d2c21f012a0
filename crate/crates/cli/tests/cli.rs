use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn brainshot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brainshot"))
        .args(args)
        .env_remove("FEWSHOT_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = brainshot(args);
    assert!(
        out.status.success(),
        "brainshot {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Small synthetic dataset plus a split; returns (manifest, split).
fn small_dataset(dir: &Path, noise: &str, nuisance: &str) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    ok(&[
        "gen-synth", "--out", s(&data), "--classes", "20", "--per-class", "20", "--rois", "24", "--noise", noise,
        "--nuisance", nuisance, "--seed", "5",
    ]);
    let manifest = data.join("manifest.json");
    let split = data.join("split.json");
    ok(&["split", "--manifest", s(&manifest), "--sizes", "10,5,5", "--seed", "1"]);
    (manifest, split)
}

#[test]
fn gen_synth_counts_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["gen-synth", "--out", s(out), "--classes", "7", "--per-class", "4", "--rois", "16", "--nuisance", "6"]);
    }
    let manifest = read_json(&a.join("manifest.json"));
    assert_eq!(manifest["classes"].as_array().unwrap().len(), 7);
    let rows = std::fs::read_to_string(a.join("samples.csv")).unwrap().lines().count();
    assert_eq!(rows, 7 * 4 + 1);
    for f in ["manifest.json", "samples.csv", "graph.csv", "ground-truth.json"] {
        assert!(same_bytes(&a.join(f), &b.join(f)), "{f} differs");
    }
}

#[test]
fn zero_noise_rows_are_identical_within_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(&[
        "gen-synth", "--out", s(&out), "--classes", "3", "--per-class", "5", "--rois", "10", "--noise", "0",
        "--nuisance", "0", "--no-graph",
    ]);
    let text = std::fs::read_to_string(out.join("samples.csv")).unwrap();
    let mut by_class = std::collections::HashMap::<String, Vec<String>>::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        by_class.entry(cols[1].to_string()).or_default().push(cols[3..].join(","));
    }
    assert_eq!(by_class.len(), 3);
    for rows in by_class.values() {
        assert!(rows.iter().all(|r| r == &rows[0]));
    }
    assert!(!out.join("graph.csv").exists());
}

#[test]
fn split_sizes_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-synth", "--out", s(&data), "--per-class", "2", "--rois", "8", "--nuisance", "2", "--no-graph"]);
    let manifest = data.join("manifest.json");

    let default = dir.path().join("default.json");
    ok(&["split", "--manifest", s(&manifest), "--out", s(&default)]);
    let v = read_json(&default);
    let len = |k: &str| v[k].as_array().unwrap().len();
    assert_eq!((len("base"), len("validation"), len("novel")), (64, 21, 21));

    let all = dir.path().join("all.json");
    ok(&["split", "--manifest", s(&manifest), "--out", s(&all), "--sizes", "106,0,0"]);
    let v = read_json(&all);
    assert_eq!(v["base"].as_array().unwrap().len(), 106);
    assert!(v["novel"].as_array().unwrap().is_empty());

    let again = dir.path().join("again.json");
    ok(&["split", "--manifest", s(&manifest), "--out", s(&again)]);
    assert!(same_bytes(&default, &again));
    let other = dir.path().join("other.json");
    ok(&["split", "--manifest", s(&manifest), "--out", s(&other), "--seed", "9"]);
    assert_ne!(read_json(&default)["novel"], read_json(&other)["novel"]);
}

fn same_bytes(a: &Path, b: &Path) -> bool {
    std::fs::read(a).unwrap() == std::fs::read(b).unwrap()
}

fn checkpoint_header(path: &Path) -> Value {
    let bytes = std::fs::read(path).unwrap();
    let end = bytes.iter().position(|&b| b == b'\n').unwrap();
    serde_json::from_slice(&bytes[..end]).unwrap()
}

#[test]
fn train_writes_reproducible_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, split) = small_dataset(dir.path(), "0.5", "4");
    let run = |out: &Path, epochs: &str| {
        ok(&[
            "train", "--manifest", s(&manifest), "--split", s(&split), "--out", s(out), "--epochs", epochs,
            "--batch-size", "20",
        ]);
        out.join("model.ckpt")
    };
    let a = run(&dir.path().join("a"), "2");
    let b = run(&dir.path().join("b"), "2");
    assert!(same_bytes(&a, &b));

    let h = checkpoint_header(&a);
    assert_eq!(h["config"]["arch"], "mlp");
    assert_eq!(h["config"]["hidden-layers"], 2);
    assert_eq!(h["config"]["width"], 360);
    assert_eq!(h["config"]["n-classes"], 10);
    assert!(dir.path().join("a/train-log.json").exists());

    // zero epochs saves the initialization, which differs from trained weights
    let init = run(&dir.path().join("init"), "0");
    assert!(!same_bytes(&init, &a));
    let init2 = run(&dir.path().join("init2"), "0");
    assert!(same_bytes(&init, &init2));
}

#[test]
fn eval_single_task_and_noiseless_data() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, split) = small_dataset(dir.path(), "0", "0");
    let out = dir.path().join("one");
    let line = ok(&[
        "eval", "--manifest", s(&manifest), "--split", s(&split), "--out", s(&out), "--tasks", "1",
    ]);
    assert!(line.contains("baseline"), "{line}");
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["ci95"], 0.0);
    assert!(out.join("report.csv").exists());

    let out = dir.path().join("many");
    ok(&["eval", "--manifest", s(&manifest), "--split", s(&split), "--out", s(&out), "--tasks", "50"]);
    assert_eq!(read_json(&out.join("report.json"))["mean"], 100.0);
}

#[test]
fn methods_on_trained_checkpoints_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, split) = small_dataset(dir.path(), "0.3", "4");
    let base = dir.path().join("base");
    ok(&[
        "train", "--manifest", s(&manifest), "--split", s(&split), "--out", s(&base), "--layers", "1", "--width",
        "64", "--epochs", "3",
    ]);
    let maml = dir.path().join("maml");
    ok(&[
        "train", "--manifest", s(&manifest), "--split", s(&split), "--out", s(&maml), "--paradigm", "maml",
        "--layers", "1", "--width", "64", "--epochs", "1", "--tasks-per-epoch", "8", "--inner-steps", "2",
    ]);
    assert_eq!(checkpoint_header(&maml.join("model.ckpt"))["inner-rate-shape"], serde_json::json!([2, 2]));

    let mut reports = Vec::new();
    for (method, ckpt) in [("simpleshot", &base), ("ptmap", &base), ("maml", &maml)] {
        let out = dir.path().join(method);
        ok(&[
            "eval", "--manifest", s(&manifest), "--split", s(&split), "--out", s(&out), "--tasks", "20", "--method",
            method, "--checkpoint", s(&ckpt.join("model.ckpt")),
        ]);
        let r = read_json(&out.join("report.json"));
        assert_eq!(r["method"], method);
        assert_eq!(r["backbone"], "MLP 1/64");
        reports.push(out);
    }
    let table_dir = dir.path().join("table");
    let mut args = vec!["compare", "--out", s(&table_dir)];
    args.extend(reports.iter().map(|p| s(p)));
    let text = ok(&args);
    assert!(text.contains("5-way 5-shot") && text.contains("maml"), "{text}");
    for f in ["comparison.csv", "comparison.json", "comparison.txt"] {
        assert!(table_dir.join(f).exists(), "{f}");
    }
}

#[test]
fn singleton_sweep_reruns_from_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, split) = small_dataset(dir.path(), "0.5", "4");
    let out = dir.path().join("sweep");
    ok(&[
        "sweep", "--manifest", s(&manifest), "--split", s(&split), "--out", s(&out), "--layers", "1", "--widths",
        "64", "--methods", "simpleshot", "--epochs", "2", "--tasks", "20",
    ]);
    let first = read_json(&out.join("sweep.json"));
    assert_eq!(first["rows"].as_array().unwrap().len(), 1);
    assert!(out.join("sweep.txt").exists());

    let rerun = dir.path().join("rerun");
    ok(&["sweep", "--config", s(&out.join("resolved-config.json")), "--out", s(&rerun)]);
    assert_eq!(first, read_json(&rerun.join("sweep.json")));
}

#[test]
fn errors_are_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let out = brainshot(&[
        "eval", "--manifest", s(&dir.path().join("missing.json")), "--split", "x.json", "--out", s(dir.path()),
    ]);
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    assert!(err["error"].as_str().unwrap().contains("missing.json"));

    let (manifest, split) = small_dataset(dir.path(), "0.5", "0");
    let out = brainshot(&[
        "eval", "--manifest", s(&manifest), "--split", s(&split), "--out", s(dir.path()), "--method", "ptmap",
    ]);
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].as_str().unwrap().contains("--checkpoint"));
}

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn msst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msst")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn synth(dir: &Path, seed: &str) {
    let out = msst(&[
        "synth", "--graph", "stick10", "--classes", "2", "--per-class", "5", "--min-frames", "6",
        "--max-frames", "10", "--seed", seed, "--out", path(dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

const TINY: &str = r#"{"layers": 3, "base_channel": 4, "heads": 1, "frames": 8,
    "epochs": 2, "warmup_epochs": 1, "batch_size": 4, "lr_max": 0.02, "val_fraction": 0.4}"#;

#[test]
fn gradcheck_on_toy_config_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = msst(&["gradcheck", "--stride", "97", "--out", path(dir.path())]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    assert!(stdout.contains("toy model end to end"));
    assert!(!stdout.contains("FAIL"));
    let entries = read(&dir.path().join("gradcheck.json"));
    assert!(entries.as_array().unwrap().len() > 20);
}

#[test]
fn ensemble_with_mismatched_ids_names_both_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("joint.json");
    let b = dir.path().join("bone.json");
    std::fs::write(&a, r#"{"tag":"J","ids":["a","b"],"classes":2,"scores":[[0.6,0.4],[0.5,0.5]]}"#).unwrap();
    std::fs::write(&b, r#"{"tag":"B","ids":["a","c"],"classes":2,"scores":[[0.3,0.7],[0.5,0.5]]}"#).unwrap();
    let out = msst(&["ensemble", "--scores", path(&a), path(&b)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("joint.json") && err.contains("bone.json"), "{err}");
}

#[test]
fn ensemble_sums_scores() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("j.json");
    let b = dir.path().join("b.json");
    std::fs::write(&a, r#"{"tag":"J","ids":["a"],"classes":2,"scores":[[0.6,0.4]],"labels":[1]}"#).unwrap();
    std::fs::write(&b, r#"{"tag":"B","ids":["a"],"classes":2,"scores":[[0.3,0.7]],"labels":[1]}"#).unwrap();
    let out_dir = dir.path().join("fused");
    let out = msst(&["ensemble", "--scores", path(&a), path(&b), "--out", path(&out_dir)]);
    assert!(out.status.success());
    let r = read(&out_dir.join("ensemble.json"));
    assert_eq!(r["predictions"], serde_json::json!([1]));
    assert_eq!(r["accuracy"], serde_json::json!(1.0));
    assert_eq!(msst(&["ensemble", "--scores", path(&a), path(&b), "--streams", "4"]).status.code(), Some(1));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(msst(&[]).status.code(), Some(2));
    assert_eq!(msst(&["train", "--data", "x.jsonl"]).status.code(), Some(2));
    assert_eq!(msst(&["train", "--modality", "skeleton"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let out = msst(&[
        "train", "--data", "x.jsonl", "--graph", "stick10", "--modality", "joint", "--k", "2", "--out",
        path(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(msst(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_data_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = msst(&["train", "--data", path(&dir.path().join("none.jsonl")), "--graph", "stick10", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_then_eval_reproduces_final_val_acc() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    synth(&data_dir, "5");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    let out = msst(&[
        "train", "--config", path(&cfg), "--data", path(&data_dir.join("data.jsonl")), "--graph", "stick10",
        "--modality", "bone", "--k", "1", "--seed", "3", "--out", path(&run), "--trace-attn",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["model.ckpt", "best.ckpt", "metrics.jsonl", "scores.json", "val.jsonl", "run.json", "manifest.json", "attention.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let last: Value = serde_json::from_str(metrics.lines().last().unwrap()).unwrap();
    assert_eq!(last["epoch"], 1);

    let eval_dir = dir.path().join("eval");
    let out = msst(&[
        "eval", "--checkpoint", path(&run.join("model.ckpt")), "--data", path(&run.join("val.jsonl")), "--out",
        path(&eval_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ev = read(&eval_dir.join("eval.json"));
    assert_eq!(ev["accuracy"].as_f64(), last["val_acc"].as_f64());
    assert_eq!(ev["tag"], "B");
    assert_eq!(read(&eval_dir.join("scores.json")), read(&run.join("scores.json")));

    let maps = read(&run.join("attention.json"));
    let maps = maps.as_array().unwrap();
    assert_eq!(maps.len(), 2 * 3);
    assert_eq!(maps[0]["kind"], "spatial");
    assert_eq!(maps[0]["map"].as_array().unwrap().len(), 10);

    let trace_dir = dir.path().join("trace");
    let out = msst(&[
        "trace", "--checkpoint", path(&run.join("model.ckpt")), "--data", path(&run.join("val.jsonl")), "--out",
        path(&trace_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read(&trace_dir.join("attention.json")).as_array().unwrap().len(), 6);
}

#[test]
fn equal_manifests_give_equal_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    synth(&data_dir, "9");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, TINY).unwrap();
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        let out = msst(&[
            "train", "--config", path(&cfg), "--data", path(&data_dir.join("data.jsonl")), "--graph", "stick10",
            "--modality", "joint-motion", "--seed", "1", "--out", path(&run),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        runs.push(run);
    }
    let m = read(&runs[0].join("manifest.json"));
    assert_eq!(m, read(&runs[1].join("manifest.json")));
    assert_eq!(m["seed"], 1);
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
    for f in ["model.ckpt", "best.ckpt", "metrics.jsonl", "scores.json"] {
        assert_eq!(std::fs::read(runs[0].join(f)).unwrap(), std::fs::read(runs[1].join(f)).unwrap(), "{f}");
    }
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "1");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"epoch": 3}"#).unwrap();
    let out = msst(&[
        "train", "--config", path(&cfg), "--data", path(&dir.path().join("data.jsonl")), "--graph", "stick10", "--out",
        path(&dir.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));
}

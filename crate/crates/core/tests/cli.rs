use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn hccr(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hccr"))
        .arg("--config")
        .arg(config)
        .arg("--deterministic")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(config: &Path, args: &[&str]) -> Value {
    let out = hccr(config, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    serde_json::from_str(text.trim()).unwrap_or(Value::String(text))
}

/// A small but complete config rooted in `dir`.
fn small_config(dir: &Path, overrides: Value) -> PathBuf {
    let mut cfg = json!({
        "work_dir": dir.join("run"),
        "data": {"train_per_class": 20, "test_per_class": 10},
        "raster": {"image_size": 16},
        "arch": {"image_size": 16},
        "train": {"batch_size": 16, "iterations": 20, "lr_step": 1000, "eval_every": 10},
        "retrain": {"batch_size": 16},
        "prune": {"interval": 2, "ramp_iters": 10, "total_prune_iters": 14},
        "quant": {"finetune_steps": 4},
    });
    merge(&mut cfg, overrides);
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn merge(a: &mut Value, b: Value) {
    match (a, b) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(Value::Null), v);
            }
        }
        (a, b) => *a = b,
    }
}

#[test]
fn unknown_key_is_a_config_error_before_any_io() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), json!({"train": {"itertions": 5}}));
    let out = hccr(&cfg, &["gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("run").exists());
    let out = hccr(&dir.path().join("missing.json"), &["train"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), json!({}));
    assert_eq!(hccr(&cfg, &["train"]).status.code(), Some(3));
    assert_eq!(hccr(&cfg, &["eval"]).status.code(), Some(3));
}

#[test]
fn generation_and_rendering_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), json!({"data": {"train_per_class": 200, "test_per_class": 5}}));
    let run = dir.path().join("run");
    let summary = ok(&cfg, &["gen-data"]);
    assert_eq!(summary["train_samples"], 2000);
    let first = fs::read(run.join("train.inkb")).unwrap();
    ok(&cfg, &["gen-data"]);
    assert_eq!(fs::read(run.join("train.inkb")).unwrap(), first);
    let ds = compact_hccr::ink::parse_trajectory_file(&first, compact_hccr::ink::InkFormat::Bin, None).unwrap();
    assert_eq!(ds.len(), 2000);

    ok(&cfg, &["render"]);
    let a = fs::read(run.join("render/test/00003.fmap")).unwrap();
    ok(&cfg, &["render"]);
    assert_eq!(fs::read(run.join("render/test/00003.fmap")).unwrap(), a);
    let fs_map = compact_hccr::sig::FeatureStack::from_fmap_bytes(&a).unwrap();
    assert_eq!(fs_map.channels, 7);
}

#[test]
fn zero_learning_rate_stays_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(
        dir.path(),
        json!({"data": {"test_per_class": 50}, "train": {"base_lr": 0.0, "eval_every": 0}}),
    );
    ok(&cfg, &["gen-data"]);
    ok(&cfg, &["render"]);
    let s = ok(&cfg, &["train"]);
    let acc = s["test_accuracy"].as_f64().unwrap();
    assert!((acc - 0.1).abs() <= 0.02, "accuracy {acc}");
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let full = small_config(dir.path(), json!({}));
    ok(&full, &["gen-data"]);
    ok(&full, &["render"]);
    ok(&full, &["train"]);
    let run = dir.path().join("run");
    let dense = fs::read(run.join("dense.dnse")).unwrap();
    let log = fs::read(run.join("train_log.jsonl")).unwrap();

    let half_dir = dir.path().join("half");
    fs::create_dir(&half_dir).unwrap();
    let half = small_config(&half_dir, json!({"work_dir": run, "train": {"iterations": 12}}));
    ok(&half, &["train"]);
    assert_ne!(fs::read(run.join("dense.dnse")).unwrap(), dense);
    ok(&full, &["train", "--resume"]);
    assert_eq!(fs::read(run.join("dense.dnse")).unwrap(), dense);
    assert_eq!(fs::read(run.join("train_log.jsonl")).unwrap(), log);
}

#[test]
fn divergence_exits_with_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), json!({"train": {"base_lr": 1e30, "momentum": 0.0}}));
    ok(&cfg, &["gen-data"]);
    ok(&cfg, &["render"]);
    let out = hccr(&cfg, &["train"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn packed_model_evaluates_like_the_quantized_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), json!({}));
    let run = dir.path().join("run");
    for stage in ["gen-data", "render", "train", "prune", "quantize", "pack"] {
        ok(&cfg, &[stage]);
    }
    let packed = ok(&cfg, &["eval"]);
    let quantized = ok(&cfg, &["eval", "--model", run.join("quantized.dnse").to_str().unwrap()]);
    assert_eq!(packed, quantized);

    let table = ok(&cfg, &["size-report"]);
    let table = table.as_str().unwrap();
    assert!(table.contains("dense_bytes") && table.contains("ratio"));
    let report = ok(&cfg, &["size-report", "--json"]);
    assert_eq!(
        report["total_bytes"].as_u64().unwrap(),
        fs::metadata(run.join("model.dwpk")).unwrap().len()
    );
    let dense = ok(&cfg, &["size-report", "--json", "--model", run.join("dense.dnse").to_str().unwrap()]);
    assert_eq!(dense["ratio"], 1.0);
}

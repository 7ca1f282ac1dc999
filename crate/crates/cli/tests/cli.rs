use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = "expert_hidden = 16\nmodel_dim = 8\ngate_hidden = 8\nepochs = 2\nbatch_size = 8\n";

fn brainnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brainnet"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = brainnet(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_cohort(dir: &Path) {
    fs::write(dir.join("small.toml"), SMALL).unwrap();
    ok(dir, &["synth", "--regions", "10", "--per-class", "6", "--seed", "3", "--out", "c"]);
}

#[test]
fn synth_writes_expected_counts_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--regions", "12", "--classes", "2", "--per-class", "10", "--out", "a"]);
    ok(d, &["synth", "--regions", "12", "--classes", "2", "--per-class", "10", "--out", "b"]);
    let labels = fs::read_to_string(d.join("a/labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 21);
    assert_eq!(labels.lines().filter(|l| l.ends_with(",test")).count(), 4);
    assert_eq!(fs::read_dir(d.join("a/subjects")).unwrap().count(), 20);
    let first = fs::read_to_string(d.join("a/subjects/sub-0000.csv")).unwrap();
    assert_eq!(first.lines().count(), 1 + 12);
    assert!(first.starts_with("R000,"));
    assert_eq!(first, fs::read_to_string(d.join("b/subjects/sub-0000.csv")).unwrap());
    assert_eq!(labels, fs::read_to_string(d.join("b/labels.csv")).unwrap());
}

#[test]
fn null_effect_size_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = brainnet(tmp.path(), &["synth", "--effect-size", "1.0", "--out", "c"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("effect_size"));
    assert!(!tmp.path().join("c").exists());
}

#[test]
fn unknown_config_key_is_named_with_suggestion() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_cohort(d);
    fs::write(d.join("bad.toml"), "n_expert = 3\n").unwrap();
    let out = brainnet(d, &["train", "--cohort", "c", "--out", "run", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("n_expert"), "{err}");
    assert!(err.contains("experts_per_group"), "{err}");
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_cohort(d);
    let out = brainnet(d, &["eval", "--cohort", "c", "--checkpoint", "nowhere"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bad_flag_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = brainnet(tmp.path(), &["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_eval_explain_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_cohort(d);
    ok(d, &["train", "--cohort", "c", "--out", "run", "--config", "small.toml"]);
    assert!(d.join("run/checkpoint/manifest.json").exists());
    assert!(d.join("run/checkpoint/weights.bin").exists());

    let manifest: Value = serde_json::from_str(&fs::read_to_string(d.join("run/run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["model"]["n_regions"], 10);
    assert!(manifest["wall_clock_seconds"].as_f64().unwrap() >= 0.0);
    assert!(manifest["artifacts"]["checkpoint"].is_string());

    let log = fs::read_to_string(d.join("run/metrics.jsonl")).unwrap();
    let records: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let steps: Vec<&Value> = records.iter().filter(|r| r["type"] == "step").collect();
    assert_eq!(steps.len(), 4);
    for key in ["epoch", "step", "cls", "e_d", "d_d", "e_b", "total"] {
        assert!(steps[0].get(key).is_some(), "missing {key}");
    }
    let last_eval = records.iter().rev().find(|r| r["type"] == "eval").unwrap();

    ok(d, &["eval", "--cohort", "c", "--checkpoint", "run/checkpoint", "--out", "m.json"]);
    let metrics: Value = serde_json::from_str(&fs::read_to_string(d.join("m.json")).unwrap()).unwrap();
    assert_eq!(metrics["accuracy"], last_eval["ACC"]);
    assert_eq!(metrics["f1"], last_eval["F1"]);

    let text = ok(d, &["explain", "--cohort", "c", "--checkpoint", "run/checkpoint", "--top", "5"]);
    let class_rows: Vec<&str> = text
        .lines()
        .skip_while(|l| !l.starts_with("class\t"))
        .skip(1)
        .take_while(|l| !l.is_empty())
        .collect();
    assert_eq!(class_rows.len(), 3 * 5);
    assert!(class_rows.iter().all(|r| r.split('\t').nth(2).unwrap().starts_with('R')));
    let pair_rows = text.lines().skip_while(|l| !l.starts_with("pair\t")).skip(1).count();
    assert_eq!(pair_rows, 3 * 5);
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_cohort(d);
    ok(d, &["train", "--cohort", "c", "--out", "a", "--config", "small.toml", "--epochs", "0"]);
    ok(d, &["train", "--cohort", "c", "--out", "b", "--config", "small.toml", "--epochs", "0"]);
    let a = fs::read(d.join("a/checkpoint/weights.bin")).unwrap();
    assert_eq!(a, fs::read(d.join("b/checkpoint/weights.bin")).unwrap());
    ok(d, &["train", "--cohort", "c", "--out", "t", "--config", "small.toml"]);
    assert_ne!(a, fs::read(d.join("t/checkpoint/weights.bin")).unwrap());
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_cohort(d);
    let table = ok(d, &["ablate", "--cohort", "c", "--out", "ab", "--config", "small.toml", "--jobs", "2"]);
    assert_eq!(table.lines().count(), 1 + 7);
    let rows = fs::read_to_string(d.join("ab/ablation.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 7);
    let json: Value = serde_json::from_str(&fs::read_to_string(d.join("ab/ablation.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 7);

    ok(d, &["ablate", "--cohort", "c", "--out", "ab2", "--config", "small.toml", "--experts", "2", "--no-loss-toggles"]);
    assert_eq!(fs::read_to_string(d.join("ab2/ablation.jsonl")).unwrap().lines().count(), 1);
}

#[test]
fn checkpoint_for_other_cohort_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_cohort(d);
    ok(d, &["train", "--cohort", "c", "--out", "run", "--config", "small.toml", "--epochs", "0"]);
    ok(d, &["synth", "--regions", "12", "--per-class", "4", "--out", "other"]);
    let out = brainnet(d, &["eval", "--cohort", "other", "--checkpoint", "run/checkpoint"]);
    assert_eq!(out.status.code(), Some(2));
}

//! The binary end to end on a tiny configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mia_former::config::{DataSource, RunConfig};
use mia_former::data::load_splits;
use mia_former::model::{model_forward, Policy};
use mia_former::train::state::TrainState;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mia-former")).args(args).output().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let mut run = RunConfig::default();
    if let DataSource::Synthetic { samples, .. } = &mut run.data.source {
        *samples = 160;
    }
    let t = &mut run.training;
    t.backbone_epochs = 1;
    t.backbone_warmup_epochs = 0;
    t.cotrain_epochs = 1;
    t.pretrain_max_epochs = 200;
    t.pretrain_probe_samples = 32;
    t.rl_frozen_epochs = 1;
    t.rl_total_epochs = 2;
    let path = dir.join("tiny.json");
    std::fs::write(&path, run.to_json()).unwrap();
    path
}

fn ok(out: &Output) {
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(bin(&[]).status.code(), Some(1));
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(bin(&["eval"]).status.code(), Some(1));
    assert_eq!(bin(&["cotrain", "--epochs", "many"]).status.code(), Some(1));
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
    assert_eq!(bin(&["flops", "--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = bin(&["eval", "--ckpt", dir.path().join("missing").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let o = bin(&["flops", "--policy", "all-on", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(".lock"), "").unwrap();
    let o = bin(&["flops", "--policy", "all-on", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn all_on_policy_has_unit_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["flops", "--policy", "all-on", "--out", dir.path().to_str().unwrap()]);
    ok(&o);
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "ratio 1.000000");
    assert!(!dir.path().join(".lock").exists());
}

#[test]
fn pipeline_runs_and_checkpoints_reload() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();

    ok(&bin(&["synth-data", "--config", cfg, "--out", &d("data")]));
    assert!(dir.path().join("data/labels.csv").exists());
    // the rest of the pipeline reads the written images back
    let mut run = RunConfig::load(Path::new(cfg)).unwrap();
    run.data.source = DataSource::Directory { path: d("data") };
    let from_dir = dir.path().join("from_dir.json");
    std::fs::write(&from_dir, run.to_json()).unwrap();
    let cfg = from_dir.to_str().unwrap();

    ok(&bin(&["pretrain-controller", "--config", cfg, "--out", &d("p")]));
    ok(&bin(&["cotrain", "--ckpt", &d("p/checkpoint"), "--target-flops-ratio", "0.6", "--out", &d("c")]));
    ok(&bin(&["finetune-rl", "--ckpt", &d("c/checkpoint"), "--inherit", "0.5", "--out", &d("r")]));
    ok(&bin(&["eval", "--ckpt", &d("r/checkpoint"), "--out", &d("e")]));
    ok(&bin(&["attack-eval", "--ckpt", &d("r/checkpoint"), "--attack", "fgsm", "--out", &d("a")]));
    ok(&bin(&["trace-policy", "--ckpt", &d("r/checkpoint"), "--grids", "1", "--out", &d("t")]));
    for f in ["e/eval.csv", "e/flops.csv", "a/robust.csv", "t/trace.csv", "t/trace.masks", "t/skip_ratios.csv", "r/rewards.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("c/run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "cotrain");
    assert_eq!(manifest["config"]["model"]["target_flops_ratio"], 0.6);
    assert_eq!(manifest["input_hash"].as_str().unwrap().len(), 64);
    let inputs = manifest["inputs"].as_array().unwrap();
    assert!(inputs.iter().any(|i| i["name"] == "dataset"));
    assert!(inputs.iter().any(|i| i["name"].as_str().unwrap().starts_with("checkpoint:")));

    // a save/load cycle keeps the logits, and they reproduce the CLI's accuracy
    let state = TrainState::load(&dir.path().join("r/checkpoint")).unwrap();
    assert_eq!(state.run.model.inherit_fraction, 0.5);
    let cfg = state.run.model.validate().unwrap();
    let (_, splits) = load_splits(&state.run).unwrap();
    let rows: Vec<usize> = (0..splits.val.len()).collect();
    let (x, labels, ids) = splits.val.batch(&rows);
    let policy = Policy::eval(&state.params, state.dims);
    let a = model_forward(&cfg, &state.params, &x, &ids, Some(&labels), policy).unwrap();
    state.save(&dir.path().join("copy")).unwrap();
    let again = TrainState::load(&dir.path().join("copy")).unwrap();
    let b = model_forward(&cfg, &again.params, &x, &ids, Some(&labels), policy).unwrap();
    let err = (&a.logits - &b.logits).mapv(f32::abs).fold(0.0f32, |m, &v| m.max(v));
    assert!(err <= 1e-6);
    let correct = a.traces.iter().filter(|t| t.correct() == Some(true)).count();
    let mut eval = csv::Reader::from_path(dir.path().join("e/eval.csv")).unwrap();
    let row = eval.records().next().unwrap().unwrap();
    let acc: f64 = row[eval.headers().unwrap().iter().position(|h| h == "accuracy").unwrap()].parse().unwrap();
    assert_eq!(acc, correct as f64 / rows.len() as f64);
}

//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1 and 4 to 8 share one pipeline on the synthetic 10-class set;
//! 9 and 10 run their own reduced pipelines.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mia_former::analytics::ablation_harness;
use mia_former::config::{DataSource, MiaConfig, RunConfig, ValidConfig};
use mia_former::controller::{DimensionSet, Heads, Mode};
use mia_former::cost::model_flops;
use mia_former::data::{load_splits, Splits};
use mia_former::model::{batch_noise, model_forward, Policy};
use mia_former::params::{controller_trunk_layout, init_model, ParamStore};
use mia_former::robust::{run_attack, AttackSpec};
use mia_former::train::log::RunLog;
use mia_former::train::stages::{
    cotrain, dense_baseline, evaluate, finetune_rl, inherit_weights, pretrain_controller, train_backbone,
};
use mia_former::train::state::TrainState;

type Verdict = Result<(bool, String), String>;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, id: usize, name: &str, v: Verdict, started: Instant) {
        let secs = started.elapsed().as_secs_f64();
        let (pass, detail) = v.unwrap_or_else(|e| (false, format!("error: {e}")));
        if !pass {
            self.failed += 1;
        }
        println!("{} {id:>2} {name}: {detail} [{secs:.1}s]", if pass { "PASS" } else { "FAIL" });
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn max_abs(a: &Array2<f32>, b: &Array2<f32>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (f64::from(*x) - f64::from(*y)).abs()).fold(0.0, f64::max)
}

fn synthetic(run: &mut RunConfig, n: usize) {
    if let DataSource::Synthetic { samples, .. } = &mut run.data.source {
        *samples = n;
    }
}

/// Configuration of the shared pipeline.
fn main_run() -> RunConfig {
    let mut run = RunConfig::default();
    synthetic(&mut run, 5000);
    run.model.alpha_magnitude = 10.0;
    let t = &mut run.training;
    t.backbone_epochs = 20;
    t.cotrain_epochs = 8;
    t.rl_frozen_epochs = 8;
    t.rl_total_epochs = 10;
    run
}

fn stage_one_identity(stage1: &TrainState, backbone: &ParamStore<f32>, splits: &Splits, hard_loss: f64, secs: f64) -> Verdict {
    let cfg = stage1.run.model.validate().map_err(err)?;
    let probe: Vec<usize> = (0..256.min(splits.val.len())).collect();
    let (x, _, ids) = splits.val.batch(&probe);
    let dynamic = model_forward(&cfg, &stage1.params, &x, &ids, None, Policy::eval(&stage1.params, DimensionSet::ALL)).map_err(err)?;
    let dense = model_forward(&cfg, backbone, &x, &ids, None, Policy::AllOn).map_err(err)?;
    let diff = max_abs(&dynamic.logits, &dense.logits);
    let pass = diff <= 1e-5 && hard_loss == 0.0 && secs <= 600.0;
    Ok((
        pass,
        format!("max |logit diff| {diff:.3e} over {} probes, hard loss {hard_loss}, pretraining {secs:.0}s", probe.len()),
    ))
}

fn random_config(rng: &mut ChaCha8Rng) -> ValidConfig {
    loop {
        let mut m = MiaConfig::tiny_vit();
        m.num_blocks = rng.random_range(1..=5);
        m.num_heads = *[1, 2, 3, 4, 6].choose(rng).unwrap();
        m.head_dim = *[4, 8, 12, 16].choose(rng).unwrap();
        let (image, patch) = *[(16, 4), (32, 8), (32, 4), (16, 2)].choose(rng).unwrap();
        m.image_size = image;
        m.patch_size = patch;
        m.token_grid = [image / patch; 2];
        m.use_class_token = rng.random();
        m.mlp_ratio = *[1.0, 1.5, 2.0, 4.0].choose(rng).unwrap();
        m.num_classes = rng.random_range(2..=10);
        if let Ok(cfg) = m.validate() {
            return cfg;
        }
    }
}

/// Model FLOPs of random controller policies against the matmul counter.
fn flops_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut policies = 0;
    let mut skipped = 0;
    let mut partial = 0;
    for c in 0..3 {
        let cfg = random_config(&mut rng);
        let store: ParamStore<f64> = init_model(&cfg, c);
        for p in 0..100u64 {
            let x = Array2::from_shape_fn((1, cfg.image_len), |_| rng.random::<f64>());
            let noise = batch_noise(&cfg, rng.random(), p, &[p]);
            let dims = *DimensionSet::subsets().choose(&mut rng).unwrap();
            let policy = Policy::Controller {
                mode: Mode::Train,
                tau: rng.random_range(0.2..3.0),
                dims,
                heads: Heads::Finals,
                noise: Some(&noise),
            };
            let out = model_forward(&cfg, &store, &x, &[p], None, policy).map_err(err)?;
            let report = model_flops(&cfg, out.traces.iter().map(|t| (t.sample_id, t.blocks.as_slice()))).map_err(err)?;
            let (model, counted) = (report.samples[0].executed as f64, out.instrumented[0] as f64);
            worst = worst.max((model - counted).abs() / counted);
            for m in &out.traces[0].blocks {
                if m.is_skipped() {
                    skipped += 1;
                } else if m.heads_kept() < cfg.num_heads || m.tokens_kept() < cfg.num_tokens {
                    partial += 1;
                }
            }
            policies += 1;
        }
    }
    Ok((
        worst <= 1e-3,
        format!("{policies} policies on 3 configs ({skipped} skipped, {partial} partial blocks), worst relative gap {worst:.2e}"),
    ))
}

fn straight_through() -> Verdict {
    let problem = common::StProblem::new(101);
    let rows = problem.compare(50, 7);
    let worst = rows.iter().map(|(_, a, n)| common::rel_err(*a, *n)).fold(0.0, f64::max);
    let informative = rows.iter().filter(|(_, a, _)| a.abs() > 1e-9).count();
    Ok((
        worst < 1e-3,
        format!("50 logits ({informative} with nonzero gradient), worst relative error {worst:.2e}"),
    ))
}

fn budget_tracking(dynamic: &TrainState, dense: &TrainState, target: f64, secs: f64) -> Verdict {
    let last = dynamic.history.iter().rev().find(|r| r.stage == "cotrain").ok_or("no co-training epochs")?;
    let exec = last.exec_ratio_mean.ok_or("no exec ratio logged")?;
    let base = dense.history.last().ok_or("no baseline epochs")?.clean_acc;
    let gap = (last.clean_acc - base).abs();
    let pass = (exec - target).abs() <= 0.05 && gap <= 0.03 && secs <= 45.0 * 60.0;
    Ok((
        pass,
        format!(
            "final epoch-mean exec ratio {exec:.4} (target {target}), val accuracy {:.4} vs dense {base:.4}, co-training + baseline {secs:.0}s",
            last.clean_acc
        ),
    ))
}

fn alpha_signs(log: &RunLog) -> Verdict {
    let steps: Vec<_> = log.steps.iter().filter(|s| s.stage == "cotrain").collect();
    if steps.is_empty() {
        return Err("no co-training steps logged".into());
    }
    let sign = |v: f64| if v > 0.0 { 1 } else if v < 0.0 { -1 } else { 0 };
    let bad = steps.iter().filter(|s| sign(s.alpha) != sign(s.exec_ratio - s.target_ratio)).count();
    let over = steps.iter().filter(|s| s.alpha > 0.0).count();
    Ok((
        bad == 0,
        format!("{} steps ({over} over budget), {bad} sign violations", steps.len()),
    ))
}

fn reward_identity(state: &TrainState, log: &RunLog) -> Verdict {
    if log.rewards.is_empty() {
        return Err("no rewards logged".into());
    }
    let bad = log.rewards.iter().filter(|r| !r.record().consistent()).count();
    let frozen = state.run.training.rl_frozen_epochs;
    let rl: Vec<_> = state.history.iter().filter(|r| r.stage == "rl_finetune").collect();
    let frozen_rows: Vec<_> = rl.iter().filter(|r| r.epoch < frozen).collect();
    let frozen_ok = frozen_rows.len() == frozen && frozen_rows.iter().all(|r| r.backbone_grad_norm == Some(0.0));
    let joint = rl
        .iter()
        .filter(|r| r.epoch >= frozen)
        .filter_map(|r| r.backbone_grad_norm)
        .fold(0.0, f64::max);
    Ok((
        bad == 0 && frozen_ok,
        format!(
            "{} rewards, {bad} inconsistent; backbone gradient norm 0 in {}/{frozen} frozen epochs (joint max {joint:.3e})",
            log.rewards.len(),
            frozen_rows.iter().filter(|r| r.backbone_grad_norm == Some(0.0)).count()
        ),
    ))
}

fn inheritance(stage2: &TrainState) -> Verdict {
    let cfg = stage2.run.model.validate().map_err(err)?;
    let trunk = controller_trunk_layout(&cfg);
    let (full, report) = inherit_weights(&stage2.params, &cfg, 1.0, stage2.seed).map_err(err)?;
    let identical = trunk.iter().all(|(name, _, _)| {
        let (a, b) = (full.get(name), stage2.params.get(name));
        a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    let full_ok = identical && report.inherited == report.total && report.reinitialized.is_empty();
    let (_, partial) = inherit_weights(&stage2.params, &cfg, 0.75, stage2.seed).map_err(err)?;
    let largest = trunk.iter().map(|(_, s, _)| s.0 * s.1).max().unwrap_or(0) as f64;
    let want = 0.75 * partial.total as f64;
    let off = (partial.inherited as f64 - want).abs();
    Ok((
        full_ok && off <= largest,
        format!(
            "rho 1.0: {} trunk tensors bit-identical {identical}; rho 0.75: {}/{} inherited ({:.4}), {off:.0} from 75% (largest tensor {largest:.0})",
            trunk.len(),
            partial.inherited,
            partial.total,
            partial.inherited as f64 / partial.total as f64
        ),
    ))
}

fn accuracy(cfg: &ValidConfig, state: &TrainState, x: &Array2<f32>, labels: &[usize], ids: &[u64]) -> Result<f64, String> {
    let out = model_forward(cfg, &state.params, x, ids, Some(labels), Policy::eval(&state.params, state.dims)).map_err(err)?;
    let correct = out.traces.iter().filter(|t| t.correct() == Some(true)).count();
    Ok(correct as f64 / labels.len() as f64)
}

fn attack_constraints(state: &TrainState, splits: &Splits) -> Verdict {
    let cfg = state.run.model.validate().map_err(err)?;
    let rows: Vec<usize> = (0..512.min(splits.val.len())).collect();
    let (x, labels, ids) = splits.val.batch(&rows);
    let clean = accuracy(&cfg, state, &x, &labels, &ids)?;

    let pgd = AttackSpec::pgd();
    let out = run_attack(&cfg, &state.params, &x, &labels, &pgd, state.dims).map_err(err)?;
    let linf = out
        .images
        .iter()
        .zip(&x)
        .map(|(a, b)| (f64::from(*a) - f64::from(*b)).abs())
        .fold(0.0, f64::max);
    let pgd_ok = linf <= pgd.epsilon && out.images.iter().all(|v| (0.0..=1.0).contains(v));
    let pgd_acc = accuracy(&cfg, state, &out.images, &labels, &ids)?;

    let fgsm = AttackSpec::fgsm();
    let out = run_attack(&cfg, &state.params, &x, &labels, &fgsm, state.dims).map_err(err)?;
    let l2 = out
        .images
        .outer_iter()
        .zip(x.outer_iter())
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (f64::from(*p) - f64::from(*q)).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let norms = out.pre_clip_norms.as_deref().ok_or("FGSM reports no pre-clip norms")?;
    let eq_gap = norms
        .iter()
        .enumerate()
        .filter(|(i, _)| !out.zero_gradient.contains(i))
        .map(|(_, n)| (n - fgsm.epsilon).abs() / fgsm.epsilon)
        .fold(0.0, f64::max);
    let fgsm_ok = l2 <= fgsm.epsilon && eq_gap <= 1e-12;
    let fgsm_acc = accuracy(&cfg, state, &out.images, &labels, &ids)?;

    let pass = pgd_ok && fgsm_ok && pgd_acc <= clean && fgsm_acc <= clean;
    Ok((
        pass,
        format!(
            "{} samples: PGD max |d|inf {linf:.6e} (eps {}), FGSM max |d|2 {l2:.6e} (eps {}), pre-clip norm gap {eq_gap:.1e}; accuracy clean {clean:.4}, PGD {pgd_acc:.4}, FGSM {fgsm_acc:.4}",
            rows.len(),
            pgd.epsilon,
            fgsm.epsilon
        ),
    ))
}

fn ablation() -> Verdict {
    let mut run = RunConfig::default();
    synthetic(&mut run, 1000);
    run.model.alpha_magnitude = 10.0;
    let t = &mut run.training;
    t.backbone_epochs = 6;
    t.cotrain_epochs = 2;
    t.rl_frozen_epochs = 1;
    t.rl_total_epochs = 2;
    let (_, splits) = load_splits(&run).map_err(err)?;
    let mut state = TrainState::new(run).map_err(err)?;
    let mut log = RunLog::new(None).map_err(err)?;
    train_backbone(&mut state, &splits, &mut log).map_err(err)?;
    pretrain_controller(&mut state, &splits, &mut log).map_err(err)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let rows = ablation_harness(&state, &splits, &DimensionSet::subsets(), Some(dir.path()), true).map_err(err)?;
    let failed: Vec<_> = rows.iter().filter_map(|r| r.error.clone()).collect();
    let empty = rows
        .iter()
        .find(|r| !r.head && !r.depth && !r.token)
        .and_then(|r| r.exec_ratio)
        .ok_or("no row for the empty subset")?;
    let forced = rows.iter().all(|r| r.disabled_forced_on == Some(true));
    let csv_rows = csv::Reader::from_path(dir.path().join("ablation.csv")).map_err(err)?.records().count();
    let pass = rows.len() == 8 && csv_rows == 8 && failed.is_empty() && format!("{empty:.3}") == "1.000" && forced;
    let table: Vec<String> = rows
        .iter()
        .map(|r| format!("{}={:.3}/{:.3}", r.dims, r.accuracy.unwrap_or(f64::NAN), r.exec_ratio.unwrap_or(f64::NAN)))
        .collect();
    Ok((
        pass,
        format!(
            "{} rows, {} failed, empty subset exec ratio {empty:.3}, disabled masks all on {forced}; acc/exec {}",
            rows.len(),
            failed.len(),
            table.join(" ")
        ),
    ))
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut run = RunConfig::default();
    synthetic(&mut run, 400);
    let t = &mut run.training;
    t.backbone_epochs = 2;
    t.cotrain_epochs = 2;
    t.rl_frozen_epochs = 1;
    t.rl_total_epochs = 2;
    let config = dir.path().join("run.json");
    std::fs::write(&config, run.to_json()).map_err(err)?;
    let pipeline = |name: &str| -> Result<(), String> {
        let root = dir.path().join(name);
        let steps: [(&str, Option<&str>, &str); 3] = [
            ("pretrain-controller", None, "p"),
            ("cotrain", Some("p/checkpoint"), "c"),
            ("finetune-rl", Some("c/checkpoint"), "r"),
        ];
        for (cmd, ckpt, out) in steps {
            let mut c = Command::new(env!("CARGO_BIN_EXE_mia-former"));
            c.env("MIA_SINGLE_THREAD", "1").arg(cmd).arg("--config").arg(&config).arg("--out").arg(root.join(out));
            if let Some(k) = ckpt {
                c.arg("--ckpt").arg(root.join(k));
            }
            let o = c.output().map_err(err)?;
            if !o.status.success() {
                return Err(format!("{cmd}: {}", String::from_utf8_lossy(&o.stderr).trim()));
            }
        }
        Ok(())
    };
    pipeline("a")?;
    pipeline("b")?;
    let files = ["p/metrics.csv", "c/metrics.csv", "c/steps.csv", "r/metrics.csv", "r/rewards.csv"];
    let read = |run: &str, f: &str| std::fs::read(Path::new(dir.path()).join(run).join(f)).map_err(err);
    let mut differing = Vec::new();
    let mut bytes = 0;
    for f in files {
        let (a, b) = (read("a", f)?, read("b", f)?);
        bytes += a.len();
        if a != b {
            differing.push(f);
        }
    }
    Ok((
        differing.is_empty(),
        format!("{} CSVs ({bytes} bytes) compared, differing: {differing:?}", files.len()),
    ))
}

fn main() {
    let mut report = Report { failed: 0 };

    let started = Instant::now();
    let run = main_run();
    let target = run.model.target_flops_ratio;
    let prepared = (|| -> Result<_, String> {
        let (_, splits) = load_splits(&run).map_err(err)?;
        let mut state = TrainState::new(run.clone()).map_err(err)?;
        let mut log = RunLog::new(None).map_err(err)?;
        train_backbone(&mut state, &splits, &mut log).map_err(err)?;
        eprintln!("backbone trained in {:.0}s", started.elapsed().as_secs_f64());
        let backbone = state.params.clone();
        let t = Instant::now();
        let outcome = pretrain_controller(&mut state, &splits, &mut log).map_err(err)?;
        Ok((splits, state, backbone, outcome.hard_loss, t.elapsed().as_secs_f64()))
    })();
    let stage1 = match &prepared {
        Ok((splits, state, backbone, hard, secs)) => {
            report.line(1, "stage-1 identity", stage_one_identity(state, backbone, splits, *hard, *secs), started);
            Some((splits, state))
        }
        Err(e) => {
            report.line(1, "stage-1 identity", Err(e.clone()), started);
            None
        }
    };

    let t = Instant::now();
    report.line(2, "FLOPs oracle equivalence", flops_oracle(), t);
    let t = Instant::now();
    report.line(3, "straight-through gradient check", straight_through(), t);

    let t = Instant::now();
    let cotrained = stage1.ok_or_else(|| "stage 1 failed".to_string()).and_then(|(splits, s1)| {
        let mut state = s1.clone();
        let mut log = RunLog::new(None).map_err(err)?;
        cotrain(&mut state, splits, &mut log).map_err(err)?;
        let dense = dense_baseline(s1, splits, &mut RunLog::new(None).map_err(err)?).map_err(err)?;
        Ok((splits, state, dense, log))
    });
    let secs = t.elapsed().as_secs_f64();
    match &cotrained {
        Ok((_, state, dense, log)) => {
            report.line(4, "budget tracking", budget_tracking(state, dense, target, secs), t);
            report.line(5, "alpha sign rule", alpha_signs(log), t);
        }
        Err(e) => {
            report.line(4, "budget tracking", Err(e.clone()), t);
            report.line(5, "alpha sign rule", Err(e.clone()), t);
        }
    }

    let t = Instant::now();
    let finetuned = cotrained.as_ref().map_err(Clone::clone).and_then(|(splits, s2, _, _)| {
        let mut state = s2.clone();
        let mut log = RunLog::new(None).map_err(err)?;
        finetune_rl(&mut state, splits, &mut log).map_err(err)?;
        Ok((state, log))
    });
    report.line(
        6,
        "reward identity and frozen phase",
        finetuned.as_ref().map_err(Clone::clone).and_then(|(s, log)| reward_identity(s, log)),
        t,
    );
    let t = Instant::now();
    report.line(
        7,
        "weight inheritance",
        cotrained.as_ref().map_err(Clone::clone).and_then(|(_, s2, _, _)| inheritance(s2)),
        t,
    );
    let t = Instant::now();
    let v = match (&finetuned, &cotrained) {
        (Ok((s3, _)), Ok((splits, ..))) => {
            let cfg = s3.run.model.validate().map_err(err);
            cfg.and_then(|cfg| evaluate(&cfg, &s3.params, &splits.val, Policy::eval(&s3.params, s3.dims)).map_err(err))
                .map(|e| eprintln!("stage-3 model: val accuracy {:.4}, exec ratio {:.4}", e.accuracy, e.exec_mean))
                .ok();
            attack_constraints(s3, splits)
        }
        (Err(e), _) | (_, Err(e)) => Err(e.clone()),
    };
    report.line(8, "attack constraints", v, t);

    let t = Instant::now();
    report.line(9, "ablation harness", ablation(), t);
    let t = Instant::now();
    report.line(10, "determinism", determinism(), t);

    println!(
        "{} of 10 criteria passed in {:.0}s",
        10 - report.failed,
        started.elapsed().as_secs_f64()
    );
    if report.failed > 0 {
        std::process::exit(1);
    }
}

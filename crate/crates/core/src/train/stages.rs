//! Stage drivers: dense backbone, controller pretraining, co-training,
//! actor-critic fine-tuning, and the dense baseline used for comparison.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::log::{RewardRow, RunLog, StepRow};
use super::losses::{a2c_graph, compute_reward, dynamic_alpha, pretrain_loss_graph};
use super::optim::{clip_global_norm, global_norm, AdamW};
use super::state::{MetricsRow, Stage, TrainState};
use super::step::{backward_chunks, fill, forward_chunks, split_chunks};
use crate::config::ValidConfig;
use crate::controller::graph::{controller_logits, CtrlGraph};
use crate::controller::{DimensionSet, Heads, MaskBundle};
use crate::cost::{differentiable_cost, SampleFlops};
use crate::data::{Dataset, Splits};
use crate::error::{MiaError, Result};
use crate::model::{batch_noise, dense_block_inputs, forward_graph, model_forward, sample_rng, GraphPolicy, Policy};
use crate::params::{controller_trunk_layout, init_layout, is_controller, is_rl_head, reinit_tensor, rl_head_layout, ParamStore, BRANCH_FINALS};

/// Accuracy and executed-FLOPs ratio of a policy on a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalStats {
    pub accuracy: f64,
    pub exec_mean: f64,
    pub exec_std: f64,
    pub traces: Vec<crate::model::SampleTrace>,
}

const EVAL_CHUNK: usize = 512;

pub fn evaluate(cfg: &ValidConfig, params: &ParamStore<f32>, data: &Dataset, policy: Policy<'_>) -> Result<EvalStats> {
    if data.is_empty() {
        return Err(MiaError::Data("evaluation on an empty dataset".into()));
    }
    let mut traces = Vec::with_capacity(data.len());
    let mut ratios = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for part in idx.chunks(EVAL_CHUNK) {
        let (images, labels, ids) = data.batch(part);
        let out = model_forward(cfg, params, &images, &ids, Some(&labels), policy)?;
        ratios.extend(out.flops.samples.iter().map(|s| s.ratio));
        traces.extend(out.traces);
    }
    let correct = traces.iter().filter(|t| t.correct() == Some(true)).count();
    let (mean, std) = mean_std(&ratios);
    Ok(EvalStats {
        accuracy: correct as f64 / data.len() as f64,
        exec_mean: mean,
        exec_std: std,
        traces,
    })
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Shuffled sample order of one epoch.
pub fn epoch_order(seed: u64, stage: Stage, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = sample_rng(seed, (stage as u64) << 32 | epoch as u64, u64::MAX);
    order.shuffle(&mut rng);
    order
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch.max(1))
}

fn check_finite_grads(grads: &ParamStore<f32>, step: u64) -> Result<()> {
    if grads.all_finite() {
        Ok(())
    } else {
        Err(MiaError::Invalid(format!("non-finite gradient at step {step}")))
    }
}

fn backbone_norm(grads: &ParamStore<f32>) -> f64 {
    global_norm(&grads.filtered(|n| !is_controller(n)))
}

/// One optimizer step of the dense backbone on cross-entropy.
fn dense_step(state: &mut TrainState, cfg: &ValidConfig, data: &Dataset, batch: &[usize], lr: f64, clip: f64) -> Result<f64> {
    let chunks = split_chunks(batch, state.run.training.micro_batch);
    let params = state.params.filtered(|n| !is_controller(n));
    let passes = forward_chunks(&params, &|_| true, &chunks, |tape, p, idx| {
        let (images, labels, _) = data.batch(idx);
        let x = tape.constant(images);
        let out = forward_graph(tape, p, cfg, x, idx.len(), GraphPolicy::Dense);
        Ok((tape.cross_entropy(out.logits, &labels), idx.len()))
    })?;
    let total: f64 = passes.iter().map(|p| p.tape.value(p.out.0).sum() as f64).sum();
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(MiaError::NonFiniteLoss {
            stage: "dense",
            epoch: state.epoch,
            step: state.global_step as usize,
            tau: state.tau,
            block_keep: 1.0,
            head_keep: 1.0,
            token_keep: 1.0,
        });
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = backward_chunks(&passes, |&(ce, rows)| vec![(ce, fill(rows, scale))]);
    check_finite_grads(&grads, state.global_step)?;
    clip_global_norm(&mut grads, clip);
    state.opt.update(&mut state.params, &grads, &|_| lr);
    state.global_step += 1;
    Ok(loss)
}

fn warmup_cosine(step: usize, warmup: usize, total: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let t = (step - warmup) as f64 / span;
    0.5 * peak * (1.0 + (std::f64::consts::PI * t).cos())
}

fn metrics_row(stage: &str, epoch: usize, task_loss: f64, eval: &EvalStats) -> MetricsRow {
    MetricsRow {
        stage: stage.to_string(),
        epoch,
        task_loss,
        cost_loss: None,
        alpha: None,
        exec_ratio_mean: None,
        exec_ratio_std: None,
        reward_mean: None,
        clean_acc: eval.accuracy,
        val_exec_ratio: eval.exec_mean,
        pretrain_hard_loss: None,
        backbone_grad_norm: None,
    }
}

fn record(state: &mut TrainState, log: &mut RunLog, row: MetricsRow) -> Result<()> {
    state.history.push(row.clone());
    log.metric(row)
}

/// Trains the dense backbone with warmup and cosine decay.
pub fn train_backbone(state: &mut TrainState, data: &Splits, log: &mut RunLog) -> Result<()> {
    if state.stage != Stage::Backbone || state.stage_complete {
        return Err(MiaError::Stage("the backbone is trained only from fresh weights".into()));
    }
    let cfg = state.run.model.validate()?;
    let tc = state.run.training.clone();
    if state.epoch == 0 && state.opt.step == 0 {
        state.opt = AdamW::new(tc.weight_decay);
    }
    let spe = steps_per_epoch(data.train.len(), tc.batch_size);
    let total = tc.backbone_epochs * spe;
    let warmup = tc.backbone_warmup_epochs * spe;
    while state.epoch < tc.backbone_epochs {
        let epoch = state.epoch;
        let order = epoch_order(state.seed, Stage::Backbone, epoch, data.train.len());
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(tc.batch_size).enumerate() {
            let lr = warmup_cosine(epoch * spe + b, warmup, total, tc.backbone_lr);
            loss_sum += dense_step(state, &cfg, &data.train, batch, lr, 0.0)? * batch.len() as f64;
        }
        let eval = evaluate(&cfg, &state.params, &data.val, Policy::AllOn)?;
        let row = metrics_row("backbone", epoch, loss_sum / data.train.len() as f64, &eval);
        record(state, log, row)?;
        state.epoch += 1;
    }
    state.stage_complete = true;
    Ok(())
}

/// Outcome of controller pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub converged: bool,
    pub epochs: usize,
    /// Mean hard pretrain loss on the probe samples.
    pub hard_loss: f64,
}

fn stack_block_inputs(inputs: &[Vec<Array2<f32>>], idx: &[usize], l: usize) -> Array2<f32> {
    let views: Vec<_> = idx.iter().map(|&i| inputs[i][l].view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal widths")
}

/// Controller logits of every block on precomputed block inputs.
fn ctrl_on_inputs(
    tape: &mut mia_autograd::Tape<f32>,
    p: &crate::params::Bound,
    cfg: &ValidConfig,
    inputs: &[Vec<Array2<f32>>],
    idx: &[usize],
) -> Vec<CtrlGraph> {
    (0..cfg.num_blocks)
        .map(|l| {
            let spatial = tape.constant(stack_block_inputs(inputs, idx, l));
            controller_logits(tape, p, cfg, l, spatial, idx.len(), Heads::Finals)
        })
        .collect()
}

/// Mean over samples of the hard pretrain loss: every decision that would
/// switch something off counts, normalized per branch.
fn probe_hard_loss(cfg: &ValidConfig, ctrl: &ParamStore<f32>, inputs: &[Vec<Array2<f32>>]) -> f64 {
    let idx: Vec<usize> = (0..inputs.len()).collect();
    let mut tape = mia_autograd::Tape::new();
    let p = crate::params::Bound::new(&mut tape, ctrl, &|_| false);
    let ctrls = ctrl_on_inputs(&mut tape, &p, cfg, inputs, &idx);
    let mut total = 0.0;
    for c in &ctrls {
        for logit in [c.logit_b, c.logit_h, c.logit_n] {
            let v = tape.value(logit);
            total += v.iter().filter(|&&x| x < 0.0).count() as f64 / v.ncols() as f64;
        }
    }
    total / inputs.len() as f64
}

/// Trains the controller alone until every probe decision keeps everything.
pub fn pretrain_controller(state: &mut TrainState, data: &Splits, log: &mut RunLog) -> Result<PretrainOutcome> {
    state.enter(Stage::ControllerPretrain, AdamW::new(0.0))?;
    let cfg = state.run.model.validate()?;
    let tc = state.run.training.clone();
    let (images, _, _) = data.train.all();
    let inputs = dense_block_inputs(&cfg, &state.params, &images);
    let n_probe = tc.pretrain_probe_samples.min(inputs.len());
    let probe = &inputs[..n_probe];
    let mut hard = probe_hard_loss(&cfg, &state.params.filtered(is_controller), probe);
    while hard > 0.0 && state.epoch < tc.pretrain_max_epochs {
        let epoch = state.epoch;
        let order = epoch_order(state.seed, Stage::ControllerPretrain, epoch, inputs.len());
        let mut soft_sum = 0.0;
        for batch in order.chunks(tc.pretrain_batch_size) {
            let ctrl = state.params.filtered(is_controller);
            let chunks = split_chunks(batch, tc.micro_batch);
            let passes = forward_chunks(&ctrl, &|_| true, &chunks, |tape, p, idx| {
                let ctrls = ctrl_on_inputs(tape, p, &cfg, &inputs, idx);
                Ok((pretrain_loss_graph(tape, &ctrls), idx.len()))
            })?;
            soft_sum += passes.iter().map(|p| p.tape.value(p.out.0).sum() as f64).sum::<f64>();
            let scale = 1.0 / batch.len() as f64;
            let grads = backward_chunks(&passes, |&(v, rows)| vec![(v, fill(rows, scale))]);
            check_finite_grads(&grads, state.global_step)?;
            state.opt.update(&mut state.params, &grads, &|_| tc.pretrain_lr);
            state.global_step += 1;
        }
        hard = probe_hard_loss(&cfg, &state.params.filtered(is_controller), probe);
        let eval = evaluate(&cfg, &state.params, &data.val, Policy::eval(&state.params, DimensionSet::ALL))?;
        let mut row = metrics_row("controller_pretrain", epoch, soft_sum / inputs.len() as f64, &eval);
        row.pretrain_hard_loss = Some(hard);
        record(state, log, row)?;
        state.epoch += 1;
    }
    let converged = hard == 0.0;
    state.stage_complete = converged;
    Ok(PretrainOutcome {
        converged,
        epochs: state.epoch,
        hard_loss: hard,
    })
}

/// Per-step summary of co-training.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub task_loss: f64,
    pub cost_loss: f64,
    pub exec_ratio: f64,
    pub alpha: f64,
    pub sample_ratios: Vec<f64>,
}

struct CotrainChunk {
    ce: mia_autograd::Var,
    cost: mia_autograd::Var,
    ratios: Vec<f64>,
    bundles: Vec<Vec<MaskBundle>>,
}

fn keep_means(cfg: &ValidConfig, bundles: &[Vec<MaskBundle>]) -> (f64, f64, f64) {
    let (mut b, mut h, mut n, mut count) = (0.0, 0.0, 0.0, 0.0);
    for m in bundles.iter().flatten() {
        b += f64::from(u8::from(m.d_block));
        h += m.heads_kept() as f64 / cfg.num_heads as f64;
        n += m.tokens_kept() as f64 / cfg.num_tokens as f64;
        count += 1.0;
    }
    (b / count, h / count, n / count)
}

/// One joint step on `task + alpha * cost` with relaxed controller masks.
pub fn cotrain_step(state: &mut TrainState, cfg: &ValidConfig, data: &Dataset, batch: &[usize]) -> Result<StepStats> {
    let tc = state.run.training.clone();
    let (tau, dims, step) = (state.tau, state.dims, state.global_step);
    let chunks = split_chunks(batch, tc.micro_batch);
    let passes = forward_chunks(&state.params, &|_| true, &chunks, |tape, p, idx| {
        let (images, labels, ids) = data.batch(idx);
        let noise = batch_noise(cfg, state.seed, step, &ids);
        let x = tape.constant(images);
        let policy = GraphPolicy::Relaxed {
            tau,
            noise: Some(&noise),
            dims,
            heads: Heads::Finals,
        };
        let out = forward_graph(tape, p, cfg, x, idx.len(), policy);
        let ce = tape.cross_entropy(out.logits, &labels);
        let cost = differentiable_cost(tape, cfg, &out.mask_vars().expect("controller masks"));
        let bundles = out.bundles(cfg);
        let ratios = bundles
            .iter()
            .zip(&ids)
            .map(|(b, &id)| SampleFlops::from_bundles(cfg, id, b).map(|f| f.ratio))
            .collect::<Result<Vec<f64>>>()?;
        Ok(CotrainChunk { ce, cost, ratios, bundles })
    })?;
    let n = batch.len() as f64;
    let sum = |f: &dyn Fn(&CotrainChunk) -> mia_autograd::Var| {
        passes.iter().map(|p| p.tape.value(f(&p.out)).sum() as f64).sum::<f64>() / n
    };
    let task = sum(&|c| c.ce);
    let cost = sum(&|c| c.cost);
    let ratios: Vec<f64> = passes.iter().flat_map(|p| p.out.ratios.iter().copied()).collect();
    let exec = ratios.iter().sum::<f64>() / n;
    if !(task.is_finite() && cost.is_finite()) {
        let bundles: Vec<Vec<MaskBundle>> = passes.iter().flat_map(|p| p.out.bundles.clone()).collect();
        let (b, h, t) = keep_means(cfg, &bundles);
        return Err(MiaError::NonFiniteLoss {
            stage: "cotrain",
            epoch: state.epoch,
            step: step as usize,
            tau,
            block_keep: b,
            head_keep: h,
            token_keep: t,
        });
    }
    let alpha = dynamic_alpha(task, cost, exec, state.run.model.target_flops_ratio, state.run.model.alpha_magnitude)?;
    let mut grads = backward_chunks(&passes, |c| {
        let rows = c.ratios.len();
        vec![(c.ce, fill(rows, 1.0 / n)), (c.cost, fill(rows, alpha / n))]
    });
    check_finite_grads(&grads, step)?;
    clip_global_norm(&mut grads, tc.grad_clip);
    let (lr_c, lr_b) = (tc.cotrain_controller_lr, tc.cotrain_backbone_lr);
    state
        .opt
        .update(&mut state.params, &grads, &|name| if is_controller(name) { lr_c } else { lr_b });
    state.global_step += 1;
    Ok(StepStats {
        task_loss: task,
        cost_loss: cost,
        exec_ratio: exec,
        alpha,
        sample_ratios: ratios,
    })
}

/// Temperature at step `k` of `total`, geometric from start to end.
pub fn tau_at(start: f64, end: f64, k: usize, total: usize) -> f64 {
    if total <= 1 {
        return end;
    }
    start * (end / start).powf(k as f64 / (total - 1) as f64)
}

/// Co-trains backbone and controller toward the FLOPs target.
pub fn cotrain(state: &mut TrainState, data: &Splits, log: &mut RunLog) -> Result<()> {
    let tc = state.run.training.clone();
    state.enter(Stage::Cotrain, AdamW::new(tc.weight_decay))?;
    let cfg = state.run.model.validate()?;
    let spe = steps_per_epoch(data.train.len(), tc.batch_size);
    let total = tc.cotrain_epochs * spe;
    let target = state.run.model.target_flops_ratio;
    while state.epoch < tc.cotrain_epochs {
        let epoch = state.epoch;
        let order = epoch_order(state.seed, Stage::Cotrain, epoch, data.train.len());
        let (mut task, mut cost, mut alpha) = (0.0, 0.0, 0.0);
        let mut ratios = Vec::with_capacity(data.train.len());
        for (b, batch) in order.chunks(tc.batch_size).enumerate() {
            state.tau = tau_at(cfg.gumbel_tau_start, cfg.gumbel_tau_end, epoch * spe + b, total);
            let step = state.global_step;
            let s = cotrain_step(state, &cfg, &data.train, batch)?;
            log.step(StepRow {
                stage: "cotrain".into(),
                epoch,
                step,
                task_loss: s.task_loss,
                cost_loss: s.cost_loss,
                exec_ratio: s.exec_ratio,
                target_ratio: target,
                alpha: s.alpha,
                tau: state.tau,
            })?;
            let w = batch.len() as f64;
            task += s.task_loss * w;
            cost += s.cost_loss * w;
            alpha += s.alpha;
            ratios.extend(s.sample_ratios);
        }
        let n = data.train.len() as f64;
        let eval = evaluate(&cfg, &state.params, &data.val, Policy::eval(&state.params, state.dims))?;
        let (mean, std) = mean_std(&ratios);
        let mut row = metrics_row("cotrain", epoch, task / n, &eval);
        row.cost_loss = Some(cost / n);
        row.alpha = Some(alpha / spe as f64);
        row.exec_ratio_mean = Some(mean);
        row.exec_ratio_std = Some(std);
        record(state, log, row)?;
        state.epoch += 1;
    }
    state.stage_complete = true;
    Ok(())
}

/// Dense continuation of a pretrained state with the co-training epoch
/// count, backbone learning rate, decay and clipping; the comparison point
/// for the dynamic model's accuracy.
pub fn dense_baseline(from: &TrainState, data: &Splits, log: &mut RunLog) -> Result<TrainState> {
    let mut state = from.clone();
    let cfg = state.run.model.validate()?;
    let tc = state.run.training.clone();
    state.opt = AdamW::new(tc.weight_decay);
    for epoch in 0..tc.cotrain_epochs {
        let order = epoch_order(state.seed, Stage::Cotrain, epoch, data.train.len());
        let mut loss_sum = 0.0;
        for batch in order.chunks(tc.batch_size) {
            loss_sum += dense_step(&mut state, &cfg, &data.train, batch, tc.cotrain_backbone_lr, tc.grad_clip)? * batch.len() as f64;
        }
        let eval = evaluate(&cfg, &state.params, &data.val, Policy::AllOn)?;
        let row = metrics_row("dense_baseline", epoch, loss_sum / data.train.len() as f64, &eval);
        state.history.push(row.clone());
        log.metric(row)?;
    }
    Ok(state)
}

/// What weight inheritance kept and replaced.
#[derive(Debug, Clone, PartialEq)]
pub struct InheritReport {
    /// Elements of the non-replaced controller tensors copied verbatim.
    pub inherited: usize,
    /// Elements of all non-replaced controller tensors.
    pub total: usize,
    pub reinitialized: Vec<String>,
}

/// Stage-3 weights: the backbone verbatim, the branch finals replaced by
/// fresh actor/critic layers, and a seeded random subset of the remaining
/// controller tensors, about `1 - rho` of their elements, re-initialized.
pub fn inherit_weights(
    params: &ParamStore<f32>,
    cfg: &ValidConfig,
    rho: f64,
    seed: u64,
) -> Result<(ParamStore<f32>, InheritReport)> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(MiaError::Invalid(format!("inherit fraction {rho} outside [0, 1]")));
    }
    let is_final = |name: &str| BRANCH_FINALS.iter().any(|f| name.contains(&format!(".{f}.")));
    let mut out = params.filtered(|n| !is_final(n) && !is_rl_head(n));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1A4E_817E);
    init_layout(&mut out, &rl_head_layout(cfg), &mut rng);

    let mut trunk = controller_trunk_layout(cfg);
    for (name, _, _) in &trunk {
        if !params.contains(name) {
            return Err(MiaError::Stage(format!("controller tensor {name} missing from the stage-2 weights")));
        }
    }
    trunk.shuffle(&mut rng);
    let total: usize = trunk.iter().map(|(_, s, _)| s.0 * s.1).sum();
    let budget = ((1.0 - rho) * total as f64).round() as usize;
    let mut reinit = 0;
    let mut names = Vec::new();
    for (name, shape, init) in &trunk {
        let size = shape.0 * shape.1;
        if reinit + size <= budget {
            reinit += size;
            out.insert(name.clone(), reinit_tensor(*shape, *init, &mut rng).mapv(|v| v as f32));
            names.push(name.clone());
        }
    }
    names.sort();
    Ok((
        out,
        InheritReport {
            inherited: total - reinit,
            total,
            reinitialized: names,
        },
    ))
}

struct HybridChunk {
    ce: mia_autograd::Var,
    a2c: mia_autograd::Var,
    rewards: Vec<RewardRow>,
    ratios: Vec<f64>,
}

/// Summary of one stage-3 step.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridStats {
    pub task_loss: f64,
    pub reward_mean: f64,
    pub backbone_grad_norm: f64,
    pub sample_ratios: Vec<f64>,
    pub rewards: Vec<RewardRow>,
}

/// One stage-3 step: the backbone descends the task loss under sampled
/// masks, the actor/critic heads descend the actor-critic loss. While
/// `frozen`, only the heads train.
pub fn hybrid_step(state: &mut TrainState, cfg: &ValidConfig, data: &Dataset, batch: &[usize], frozen: bool) -> Result<HybridStats> {
    let tc = state.run.training.clone();
    let (dims, step, epoch) = (state.dims, state.global_step, state.epoch);
    let (target, beta) = (state.run.model.target_flops_ratio, state.run.model.beta);
    let chunks = split_chunks(batch, tc.micro_batch);
    let trainable: &(dyn Fn(&str) -> bool + Sync) = if frozen { &is_rl_head } else { &|_| true };
    let passes = forward_chunks(&state.params, trainable, &chunks, |tape, p, idx| {
        let (images, labels, ids) = data.batch(idx);
        let noise = batch_noise(cfg, state.seed, step, &ids);
        let x = tape.constant(images);
        let out = forward_graph(tape, p, cfg, x, idx.len(), GraphPolicy::Sampled { noise: Some(&noise), dims });
        let ce = tape.cross_entropy(out.logits, &labels);
        let logits = tape.value(out.logits).clone();
        let bundles = out.bundles(cfg);
        let mut rewards = Vec::with_capacity(idx.len());
        let mut ratios = Vec::with_capacity(idx.len());
        for (s, &id) in ids.iter().enumerate() {
            let ratio = SampleFlops::from_bundles(cfg, id, &bundles[s])?.ratio;
            let row = logits.row(s);
            let pred = (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            let r = compute_reward(pred == labels[s], ratio, target, beta);
            ratios.push(ratio);
            rewards.push(RewardRow {
                epoch,
                step,
                sample_id: id,
                y: r.y,
                exec_ratio: r.exec_ratio,
                target_ratio: r.target_ratio,
                beta: r.beta,
                reward: r.reward,
            });
        }
        let rv: Vec<f64> = rewards.iter().map(|r| r.reward).collect();
        let mut a2c: Option<mia_autograd::Var> = None;
        for (l, blk) in out.blocks.iter().enumerate() {
            let (ctrl, masks) = (blk.ctrl.as_ref().expect("controller"), blk.masks.as_ref().expect("masks"));
            let g = a2c_graph(tape, p, l, ctrl, masks, dims, &rv, tc.value_coef, tc.entropy_coef);
            a2c = Some(match a2c {
                Some(a) => tape.add(a, g.loss),
                None => g.loss,
            });
        }
        Ok(HybridChunk {
            ce,
            a2c: a2c.expect("at least one block"),
            rewards,
            ratios,
        })
    })?;
    let n = batch.len() as f64;
    let task = passes.iter().map(|p| p.tape.value(p.out.ce).sum() as f64).sum::<f64>() / n;
    let a2c_total = passes.iter().map(|p| p.tape.value(p.out.a2c).sum() as f64).sum::<f64>() / n;
    if !(task.is_finite() && a2c_total.is_finite()) {
        return Err(MiaError::NonFiniteLoss {
            stage: "rl_finetune",
            epoch,
            step: step as usize,
            tau: state.tau,
            block_keep: f64::NAN,
            head_keep: f64::NAN,
            token_keep: f64::NAN,
        });
    }
    let mut grads = backward_chunks(&passes, |c| {
        let rows = c.ratios.len();
        vec![(c.ce, fill(rows, 1.0 / n)), (c.a2c, fill(rows, 1.0 / n))]
    });
    check_finite_grads(&grads, step)?;
    let backbone_grad_norm = backbone_norm(&grads);
    clip_global_norm(&mut grads, tc.grad_clip);
    let (lr_c, lr_b) = (tc.rl_controller_lr, tc.rl_backbone_lr);
    state
        .opt
        .update(&mut state.params, &grads, &|name| if is_controller(name) { lr_c } else { lr_b });
    state.global_step += 1;
    let rewards: Vec<RewardRow> = passes.iter().flat_map(|p| p.out.rewards.clone()).collect();
    let reward_mean = rewards.iter().map(|r| r.reward).sum::<f64>() / n;
    Ok(HybridStats {
        task_loss: task,
        reward_mean,
        backbone_grad_norm,
        sample_ratios: passes.iter().flat_map(|p| p.out.ratios.clone()).collect(),
        rewards,
    })
}

/// Installs the actor/critic heads (unless resuming) and runs the frozen
/// and joint phases.
pub fn finetune_rl(state: &mut TrainState, data: &Splits, log: &mut RunLog) -> Result<Option<InheritReport>> {
    let tc = state.run.training.clone();
    let cfg = state.run.model.validate()?;
    let resuming = state.stage == Stage::RlFinetune && !state.stage_complete;
    let mut report = None;
    if !resuming {
        if state.stage != Stage::Cotrain || !state.stage_complete {
            return Err(MiaError::Stage("actor-critic fine-tuning needs a completed co-training checkpoint".into()));
        }
        let (params, r) = inherit_weights(&state.params, &cfg, state.run.model.inherit_fraction, state.seed)?;
        state.params = params;
        state.enter(Stage::RlFinetune, AdamW::new(tc.weight_decay))?;
        report = Some(r);
    }
    while state.epoch < tc.rl_total_epochs {
        let epoch = state.epoch;
        let frozen = epoch < tc.rl_frozen_epochs;
        let order = epoch_order(state.seed, Stage::RlFinetune, epoch, data.train.len());
        let (mut task, mut reward, mut norm) = (0.0, 0.0, 0.0f64);
        let mut ratios = Vec::with_capacity(data.train.len());
        for batch in order.chunks(tc.batch_size) {
            let s = hybrid_step(state, &cfg, &data.train, batch, frozen)?;
            let w = batch.len() as f64;
            task += s.task_loss * w;
            reward += s.reward_mean * w;
            norm = norm.max(s.backbone_grad_norm);
            ratios.extend(s.sample_ratios);
            log.rewards(s.rewards)?;
        }
        let n = data.train.len() as f64;
        let eval = evaluate(&cfg, &state.params, &data.val, Policy::eval(&state.params, state.dims))?;
        let (mean, std) = mean_std(&ratios);
        let mut row = metrics_row("rl_finetune", epoch, task / n, &eval);
        row.exec_ratio_mean = Some(mean);
        row.exec_ratio_std = Some(std);
        row.reward_mean = Some(reward / n);
        row.backbone_grad_norm = Some(norm);
        record(state, log, row)?;
        state.epoch += 1;
    }
    state.stage_complete = true;
    Ok(report)
}

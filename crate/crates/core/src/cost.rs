//! FLOPs accounting. One FLOP per multiply and per add of every matrix
//! multiply (`2*m*k*p`); softmax, normalization and elementwise work are not
//! counted.

use std::io::Write;
use std::path::Path;

use mia_autograd::{Scalar, Tape, Var};
use serde::Serialize;

use crate::config::ValidConfig;
use crate::controller::MaskBundle;
use crate::error::{MiaError, Result};
use crate::geometry::cnn_grids;

/// `(msa, mlp)` FLOPs of one block with `h_active` heads and `n_active`
/// spatial tokens (the class token, if enabled, is added here).
pub fn block_flops(h_active: usize, n_active: usize, cfg: &ValidConfig) -> Result<(u64, u64)> {
    if h_active > cfg.num_heads || n_active > cfg.num_tokens {
        return Err(MiaError::Invalid(format!(
            "active counts (h={h_active}, n={n_active}) exceed (H={}, N={})",
            cfg.num_heads, cfg.num_tokens
        )));
    }
    let n = (n_active + usize::from(cfg.use_class_token)) as u64;
    let h = h_active as u64;
    let e = cfg.head_dim as u64;
    let rg = cfg.mlp_group as u64;
    let msa = 8 * e * e * n * h * h + 4 * e * h * n * n;
    let mlp = 4 * e * rg * n * h * h;
    Ok((msa, mlp))
}

fn controller_parts(cfg: &ValidConfig) -> (u64, u64) {
    let [g0, g1, _] = cnn_grids(cfg);
    let (c, w) = (cfg.embed_dim as u64, cfg.ctrl_width as u64);
    let p0 = (g0.0 * g0.1) as u64;
    let p1 = (g1.0 * g1.1) as u64;
    let hd = (cfg.num_heads * cfg.e_dprime) as u64;
    let n = cfg.num_tokens as u64;
    let always = 2 * p0 * 9 * c * w + 2 * p1 * 9 * w * w + 2 * w;
    let branches = 2 * w * hd + 2 * hd + 2 * n * (c * w + w * w) + 2 * n * w;
    (always, branches)
}

/// Controller FLOPs of one block: the block branch always, the head and token
/// branches only when the block runs.
pub fn controller_flops(cfg: &ValidConfig, skipped_block: bool) -> u64 {
    let (always, branches) = controller_parts(cfg);
    if skipped_block {
        always
    } else {
        always + branches
    }
}

pub fn embed_flops(cfg: &ValidConfig) -> u64 {
    2 * (cfg.num_tokens * cfg.patch_dim * cfg.embed_dim) as u64
}

pub fn classifier_flops(cfg: &ValidConfig) -> u64 {
    2 * (cfg.embed_dim * cfg.num_classes) as u64
}

/// FLOPs of the model with every mask on, controller included.
pub fn total_flops(cfg: &ValidConfig) -> u64 {
    let (msa, mlp) = block_flops(cfg.num_heads, cfg.num_tokens, cfg).expect("full counts in range");
    embed_flops(cfg) + classifier_flops(cfg) + cfg.num_blocks as u64 * (msa + mlp + controller_flops(cfg, false))
}

fn total_without_controller(cfg: &ValidConfig) -> u64 {
    total_flops(cfg) - cfg.num_blocks as u64 * controller_flops(cfg, false)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockFlops {
    pub block: usize,
    pub msa: u64,
    pub mlp: u64,
    pub controller: u64,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleFlops {
    pub sample_id: u64,
    pub per_block: Vec<BlockFlops>,
    pub embed: u64,
    pub classifier: u64,
    pub executed: u64,
    pub total: u64,
    pub ratio: f64,
    pub ratio_without_controller: f64,
}

impl SampleFlops {
    pub fn from_bundles(cfg: &ValidConfig, sample_id: u64, bundles: &[MaskBundle]) -> Result<Self> {
        if bundles.len() != cfg.num_blocks {
            return Err(MiaError::Invalid(format!(
                "trace of sample {sample_id} covers {} of {} blocks",
                bundles.len(),
                cfg.num_blocks
            )));
        }
        let mut per_block = Vec::with_capacity(bundles.len());
        for (l, m) in bundles.iter().enumerate() {
            m.check_shape(cfg)?;
            let (msa, mlp) = if m.is_skipped() {
                (0, 0)
            } else {
                block_flops(m.heads_kept(), m.tokens_kept(), cfg)?
            };
            per_block.push(BlockFlops {
                block: l,
                msa,
                mlp,
                controller: controller_flops(cfg, m.is_skipped()),
                skipped: m.is_skipped(),
            });
        }
        let embed = embed_flops(cfg);
        let classifier = classifier_flops(cfg);
        let blocks: u64 = per_block.iter().map(|b| b.msa + b.mlp + b.controller).sum();
        let ctrl: u64 = per_block.iter().map(|b| b.controller).sum();
        let executed = embed + classifier + blocks;
        let total = total_flops(cfg);
        Ok(Self {
            sample_id,
            per_block,
            embed,
            classifier,
            executed,
            total,
            ratio: executed as f64 / total as f64,
            ratio_without_controller: (executed - ctrl) as f64 / total_without_controller(cfg) as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsReport {
    pub samples: Vec<SampleFlops>,
    pub total: u64,
    pub mean_executed: f64,
    pub mean_ratio: f64,
    pub std_ratio: f64,
    pub mean_ratio_without_controller: f64,
}

impl FlopsReport {
    pub fn from_samples(cfg: &ValidConfig, samples: Vec<SampleFlops>) -> Result<Self> {
        if samples.is_empty() {
            return Err(MiaError::Invalid("FLOPs report over zero samples".into()));
        }
        let k = samples.len() as f64;
        let mean_ratio = samples.iter().map(|s| s.ratio).sum::<f64>() / k;
        let var = samples.iter().map(|s| (s.ratio - mean_ratio).powi(2)).sum::<f64>() / k;
        Ok(Self {
            total: total_flops(cfg),
            mean_executed: samples.iter().map(|s| s.executed as f64).sum::<f64>() / k,
            mean_ratio,
            std_ratio: var.sqrt(),
            mean_ratio_without_controller: samples.iter().map(|s| s.ratio_without_controller).sum::<f64>() / k,
            samples,
        })
    }

    /// Flat CSV: one row per (sample, block), then per-sample and batch
    /// summary rows with `block` set to `embed`, `classifier`, `sample` or `mean`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("sample_id,block,msa,mlp,controller,skipped,executed,total,ratio\n");
        for s in &self.samples {
            for b in &s.per_block {
                out.push_str(&format!(
                    "{},{},{},{},{},{},,,\n",
                    s.sample_id, b.block, b.msa, b.mlp, b.controller, u8::from(b.skipped)
                ));
            }
            out.push_str(&format!("{},embed,{},,,,,,\n", s.sample_id, s.embed));
            out.push_str(&format!("{},classifier,{},,,,,,\n", s.sample_id, s.classifier));
            out.push_str(&format!("{},sample,,,,,{},{},{}\n", s.sample_id, s.executed, s.total, s.ratio));
        }
        out.push_str(&format!(
            "all,mean,,,,,{},{},{}\n",
            self.mean_executed, self.total, self.mean_ratio
        ));
        out.push_str(&format!(
            "all,mean_without_controller,,,,,,,{}\n",
            self.mean_ratio_without_controller
        ));
        let mut f = std::fs::File::create(path).map_err(|e| MiaError::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| MiaError::io(path, e))
    }
}

/// Per-sample FLOPs report of a set of per-block decision lists.
pub fn model_flops<'a>(cfg: &ValidConfig, traces: impl IntoIterator<Item = (u64, &'a [MaskBundle])>) -> Result<FlopsReport> {
    let samples = traces
        .into_iter()
        .map(|(id, bundles)| SampleFlops::from_bundles(cfg, id, bundles))
        .collect::<Result<Vec<_>>>()?;
    FlopsReport::from_samples(cfg, samples)
}

/// Per-block masks on the tape: block `(batch,1)`, heads `(batch,H)`,
/// tokens `(batch,N)`.
#[derive(Debug, Clone, Copy)]
pub struct MaskVars {
    pub b: Var,
    pub h: Var,
    pub n: Var,
}

/// Executed-FLOPs ratio as a differentiable function of the masks, one value
/// per sample `(batch, 1)`. On hard masks it equals the per-sample
/// [`SampleFlops::ratio`].
pub fn differentiable_cost<T: Scalar>(tape: &mut Tape<T>, cfg: &ValidConfig, masks: &[MaskVars]) -> Var {
    assert_eq!(masks.len(), cfg.num_blocks, "one mask set per block");
    let e = cfg.head_dim as f64;
    let rg = cfg.mlp_group as f64;
    let (always, branches) = controller_parts(cfg);
    let cls = T::of(f64::from(u8::from(cfg.use_class_token)));
    let mut acc: Option<Var> = None;
    for m in masks {
        let h = tape.sum_cols(m.h);
        let n0 = tape.sum_cols(m.n);
        let n = tape.affine(n0, T::one(), cls);
        let hh = tape.mul(h, h);
        let nhh = tape.mul(n, hh);
        let nn = tape.mul(n, n);
        let hnn = tape.mul(h, nn);
        let qkv_proj = tape.affine(nhh, T::of(8.0 * e * e), T::zero());
        let attn = tape.affine(hnn, T::of(4.0 * e), T::zero());
        let mlp = tape.affine(nhh, T::of(4.0 * e * rg), T::zero());
        let msa = tape.add(qkv_proj, attn);
        let body = tape.add(msa, mlp);
        let body = tape.affine(body, T::one(), T::of(branches as f64));
        let gated = tape.mul(body, m.b);
        let term = tape.affine(gated, T::one(), T::of(always as f64));
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    let fixed = T::of((embed_flops(cfg) + classifier_flops(cfg)) as f64);
    let executed = tape.affine(acc.expect("at least one block"), T::one(), fixed);
    tape.div_scalar(executed, T::of(total_flops(cfg) as f64))
}

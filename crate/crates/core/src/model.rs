//! Full model forward: controller decisions and masked blocks, per block.

use mia_autograd::{Scalar, Tape, Var};
use ndarray::{s, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, block_forward_sample, classify_sample, embed_sample, BlockWeights};
use crate::config::ValidConfig;
use crate::controller::graph::{controller_logits, relaxed_masks, sampled_masks, CtrlGraph, GraphMasks};
use crate::controller::{controller_step, has_rl_heads, BlockNoise, ControllerWeights, DimensionSet, Heads, MaskBundle, Mode};
use crate::cost::{FlopsReport, MaskVars, SampleFlops};
use crate::error::{MiaError, Result};
use crate::numerics::FlopCounter;
use crate::parallel;
use crate::params::{Bound, ParamStore};

/// Decisions of every block for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub sample_id: u64,
    pub blocks: Vec<MaskBundle>,
    pub predicted: usize,
    pub label: Option<usize>,
}

impl SampleTrace {
    pub fn correct(&self) -> Option<bool> {
        self.label.map(|l| l == self.predicted)
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream per (seed, step, sample), so decisions do not depend on
/// batch composition or thread scheduling.
pub fn sample_rng(seed: u64, step: u64, sample_id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(mix(seed) ^ step) ^ sample_id))
}

/// Decision noise of every block of one sample.
pub fn sample_noise(cfg: &ValidConfig, seed: u64, step: u64, sample_id: u64) -> Vec<BlockNoise> {
    let mut rng = sample_rng(seed, step, sample_id);
    (0..cfg.num_blocks).map(|_| BlockNoise::draw(cfg, &mut rng)).collect()
}

pub fn batch_noise(cfg: &ValidConfig, seed: u64, step: u64, ids: &[u64]) -> Vec<Vec<BlockNoise>> {
    ids.iter().map(|&id| sample_noise(cfg, seed, step, id)).collect()
}

/// Where the masks of the inference route come from.
#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    Controller {
        mode: Mode,
        tau: f64,
        dims: DimensionSet,
        heads: Heads,
        /// `[sample][block]`, required in train mode.
        noise: Option<&'a [Vec<BlockNoise>]>,
    },
    /// `[sample][block]`
    Fixed(&'a [Vec<MaskBundle>]),
    AllOn,
    SkipAll,
}

impl Policy<'_> {
    /// Deterministic controller policy, reading the actors once installed.
    pub fn eval<T: Scalar>(store: &ParamStore<T>, dims: DimensionSet) -> Self {
        Policy::Controller {
            mode: Mode::Eval,
            tau: 1.0,
            dims,
            heads: if has_rl_heads(store) { Heads::Actors } else { Heads::Finals },
            noise: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub logits: Array2<T>,
    pub traces: Vec<SampleTrace>,
    pub flops: FlopsReport,
    /// Matrix-multiply FLOPs actually performed per sample.
    pub instrumented: Vec<u64>,
}

fn argmax<T: Scalar>(row: ArrayView1<'_, T>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn forward_sample<T: Scalar>(
    cfg: &ValidConfig,
    store: &ParamStore<T>,
    image: ArrayView1<'_, T>,
    b: usize,
    policy: Policy<'_>,
) -> Result<(Array2<T>, Vec<MaskBundle>, u64)> {
    let counter = FlopCounter::new();
    let mut x = embed_sample(cfg, store, image, &counter);
    let off = usize::from(cfg.use_class_token);
    let mut bundles = Vec::with_capacity(cfg.num_blocks);
    for l in 0..cfg.num_blocks {
        let bundle = match policy {
            Policy::Controller {
                mode,
                tau,
                dims,
                heads,
                noise,
            } => {
                let w = ControllerWeights::from_store(store, l, heads)?;
                let spatial = x.slice(s![off.., ..]).to_owned();
                let noise = noise.map(|n| &n[b][l]);
                controller_step(cfg, &w, &spatial, tau, mode, noise, dims, &counter)?.bundle
            }
            Policy::Fixed(f) => f[b][l].clone(),
            Policy::AllOn => MaskBundle::all_on(cfg),
            Policy::SkipAll => MaskBundle::skipped(cfg, 0.0),
        };
        bundle.check_shape(cfg)?;
        let w = BlockWeights::from_store(store, l);
        x = block_forward_sample(cfg, &w, &x, &bundle, &counter);
        bundles.push(bundle);
    }
    let logits = classify_sample(cfg, store, &x, &counter);
    Ok((logits, bundles, counter.flops()))
}

/// Inference forward over flat `(batch, C*S*S)` images, samples in parallel.
pub fn model_forward<T: Scalar>(
    cfg: &ValidConfig,
    store: &ParamStore<T>,
    images: &Array2<T>,
    ids: &[u64],
    labels: Option<&[usize]>,
    policy: Policy<'_>,
) -> Result<ForwardOutput<T>> {
    let batch = images.nrows();
    if images.ncols() != cfg.image_len {
        return Err(MiaError::shape("image row", cfg.image_len, images.ncols()));
    }
    if ids.len() != batch || labels.is_some_and(|l| l.len() != batch) {
        return Err(MiaError::shape("ids/labels", batch, ids.len()));
    }
    match policy {
        Policy::Controller { mode, noise, .. } => {
            if mode == Mode::Train && noise.is_none_or(|n| n.len() != batch) {
                return Err(MiaError::Invalid("train-mode forward needs noise for every sample".into()));
            }
        }
        Policy::Fixed(f) if f.len() != batch || f.iter().any(|p| p.len() != cfg.num_blocks) => {
            return Err(MiaError::shape("fixed policy", (batch, cfg.num_blocks), f.len()));
        }
        _ => {}
    }
    let rows: Vec<usize> = (0..batch).collect();
    let results = parallel::map(&rows, |_, &b| forward_sample(cfg, store, images.row(b), b, policy));
    let mut logits = Array2::zeros((batch, cfg.num_classes));
    let mut traces = Vec::with_capacity(batch);
    let mut instrumented = Vec::with_capacity(batch);
    let mut samples = Vec::with_capacity(batch);
    for (b, r) in results.into_iter().enumerate() {
        let (row, bundles, flops) = r?;
        logits.row_mut(b).assign(&row.row(0));
        samples.push(SampleFlops::from_bundles(cfg, ids[b], &bundles)?);
        traces.push(SampleTrace {
            sample_id: ids[b],
            blocks: bundles,
            predicted: argmax(row.row(0)),
            label: labels.map(|l| l[b]),
        });
        instrumented.push(flops);
    }
    Ok(ForwardOutput {
        logits,
        traces,
        flops: FlopsReport::from_samples(cfg, samples)?,
        instrumented,
    })
}

/// Spatial token rows `(N, C)` entering every block of the fully active
/// backbone, per sample: `[sample][block]`.
pub fn dense_block_inputs<T: Scalar>(cfg: &ValidConfig, store: &ParamStore<T>, images: &Array2<T>) -> Vec<Vec<Array2<T>>> {
    let rows: Vec<usize> = (0..images.nrows()).collect();
    let off = usize::from(cfg.use_class_token);
    let all_on = MaskBundle::all_on(cfg);
    parallel::map(&rows, |_, &b| {
        let counter = FlopCounter::new();
        let mut x = embed_sample(cfg, store, images.row(b), &counter);
        let mut out = Vec::with_capacity(cfg.num_blocks);
        for l in 0..cfg.num_blocks {
            out.push(x.slice(s![off.., ..]).to_owned());
            x = block_forward_sample(cfg, &BlockWeights::from_store(store, l), &x, &all_on, &counter);
        }
        out
    })
}

/// Where the masks of the tape route come from.
#[derive(Debug, Clone, Copy)]
pub enum GraphPolicy<'a> {
    /// No controller; the plain backbone.
    Dense,
    /// Straight-through relaxed controller masks (train mode with noise).
    Relaxed {
        tau: f64,
        noise: Option<&'a [Vec<BlockNoise>]>,
        dims: DimensionSet,
        heads: Heads,
    },
    /// Actions sampled from the stage-3 actors.
    Sampled {
        noise: Option<&'a [Vec<BlockNoise>]>,
        dims: DimensionSet,
    },
    /// `[sample][block]`
    Fixed(&'a [Vec<MaskBundle>]),
}

#[derive(Debug, Clone)]
pub struct GraphBlock<T> {
    pub masks: Option<GraphMasks<T>>,
    pub ctrl: Option<CtrlGraph>,
}

#[derive(Debug, Clone)]
pub struct GraphOutput<T> {
    pub logits: Var,
    pub blocks: Vec<GraphBlock<T>>,
    pub batch: usize,
}

impl<T: Scalar> GraphOutput<T> {
    /// `[sample][block]` hard decisions.
    pub fn bundles(&self, cfg: &ValidConfig) -> Vec<Vec<MaskBundle>> {
        let mut out = vec![Vec::with_capacity(cfg.num_blocks); self.batch];
        for blk in &self.blocks {
            let per = match &blk.masks {
                Some(m) => m.bundles(cfg),
                None => vec![MaskBundle::all_on(cfg); self.batch],
            };
            for (s, m) in per.into_iter().enumerate() {
                out[s].push(m);
            }
        }
        out
    }

    pub fn mask_vars(&self) -> Option<Vec<MaskVars>> {
        self.blocks
            .iter()
            .map(|b| b.masks.as_ref().map(|m| MaskVars { b: m.b, h: m.h, n: m.n }))
            .collect()
    }
}

fn noise_at(noise: Option<&[Vec<BlockNoise>]>, l: usize) -> Option<Vec<&BlockNoise>> {
    noise.map(|n| n.iter().map(|per| &per[l]).collect())
}

/// Tape forward over `images`, a `(batch, C*S*S)` node.
pub fn forward_graph<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ValidConfig,
    images: Var,
    batch: usize,
    policy: GraphPolicy<'_>,
) -> GraphOutput<T> {
    let mut x = backbone::graph::embed(tape, p, cfg, images, batch);
    let spatial_idx = backbone::graph::spatial_rows(cfg, batch);
    let mut blocks = Vec::with_capacity(cfg.num_blocks);
    for l in 0..cfg.num_blocks {
        let (masks, ctrl) = match policy {
            GraphPolicy::Dense => (None, None),
            GraphPolicy::Relaxed { tau, noise, dims, heads } => {
                let spatial = tape.gather_rows(x, &spatial_idx);
                let c = controller_logits(tape, p, cfg, l, spatial, batch, heads);
                let n = noise_at(noise, l);
                (Some(relaxed_masks(tape, &c, tau, n.as_deref(), dims)), Some(c))
            }
            GraphPolicy::Sampled { noise, dims } => {
                // the actor-critic loss must not reach the backbone
                let spatial = tape.gather_rows(x, &spatial_idx);
                let detached = tape.value(spatial).clone();
                let spatial = tape.constant(detached);
                let c = controller_logits(tape, p, cfg, l, spatial, batch, Heads::Actors);
                let n = noise_at(noise, l);
                (Some(sampled_masks(tape, &c, n.as_deref(), dims)), Some(c))
            }
            GraphPolicy::Fixed(f) => {
                let per: Vec<&MaskBundle> = f.iter().map(|s| &s[l]).collect();
                (Some(GraphMasks::from_bundles(tape, cfg, &per)), None)
            }
        };
        let row_masks = masks
            .as_ref()
            .map(|m| backbone::graph::BlockMasks::from_sample_masks(tape, cfg, batch, m.b, m.h, m.n));
        x = backbone::graph::block(tape, p, cfg, l, x, batch, row_masks.as_ref());
        blocks.push(GraphBlock { masks, ctrl });
    }
    let logits = backbone::graph::classify(tape, p, cfg, x, batch);
    GraphOutput { logits, blocks, batch }
}

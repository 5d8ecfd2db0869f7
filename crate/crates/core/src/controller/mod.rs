//! Per-block controller: block, head and token keep decisions.
//!
//! Each decision is a single keep-logit relaxed as a binary concrete
//! (Gumbel-sigmoid) variable. The hard decision is the sign of the noisy,
//! temperature-scaled logit, which is the same as thresholding the soft value
//! at one half with ties kept.

pub mod graph;

use std::fmt;
use std::str::FromStr;

use mia_autograd::{sigmoid, Scalar};
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ValidConfig;
use crate::error::{MiaError, Result};
use crate::geometry::{cnn_grids, conv3x3_index, pool2x2_groups};
use crate::numerics::{linear, mean_rows, relu_inplace, FlopCounter};
use crate::params::{ctrl_name, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Hard and soft decisions of one block for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskBundle {
    pub d_block: bool,
    pub g_block: f64,
    pub d_heads: Vec<bool>,
    pub g_heads: Option<Vec<f64>>,
    pub d_tokens: Vec<bool>,
    pub g_tokens: Option<Vec<f64>>,
}

impl MaskBundle {
    pub fn all_on(cfg: &ValidConfig) -> Self {
        Self {
            d_block: true,
            g_block: 1.0,
            d_heads: vec![true; cfg.num_heads],
            g_heads: Some(vec![1.0; cfg.num_heads]),
            d_tokens: vec![true; cfg.num_tokens],
            g_tokens: Some(vec![1.0; cfg.num_tokens]),
        }
    }

    /// Whole block skipped; sub-masks recorded as all ones.
    pub fn skipped(cfg: &ValidConfig, g_block: f64) -> Self {
        Self {
            d_block: false,
            g_block,
            d_heads: vec![true; cfg.num_heads],
            g_heads: None,
            d_tokens: vec![true; cfg.num_tokens],
            g_tokens: None,
        }
    }

    pub fn is_skipped(&self) -> bool {
        !self.d_block
    }

    pub fn heads_kept(&self) -> usize {
        self.d_heads.iter().filter(|&&d| d).count()
    }

    pub fn tokens_kept(&self) -> usize {
        self.d_tokens.iter().filter(|&&d| d).count()
    }

    pub fn check_shape(&self, cfg: &ValidConfig) -> Result<()> {
        if self.d_heads.len() != cfg.num_heads {
            return Err(MiaError::shape("head mask", cfg.num_heads, self.d_heads.len()));
        }
        if self.d_tokens.len() != cfg.num_tokens {
            return Err(MiaError::shape("token mask", cfg.num_tokens, self.d_tokens.len()));
        }
        Ok(())
    }
}

/// Which dynamic dimensions the controller may switch off. Disabled
/// dimensions are forced on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DimensionSet {
    pub depth: bool,
    pub head: bool,
    pub token: bool,
}

impl DimensionSet {
    pub const ALL: Self = Self {
        depth: true,
        head: true,
        token: true,
    };
    pub const NONE: Self = Self {
        depth: false,
        head: false,
        token: false,
    };

    /// The eight subsets, empty first and full last.
    pub fn subsets() -> Vec<Self> {
        (0..8u8)
            .map(|m| Self {
                head: m & 1 != 0,
                depth: m & 2 != 0,
                token: m & 4 != 0,
            })
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        !(self.depth || self.head || self.token)
    }
}

impl fmt::Display for DimensionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.head {
            parts.push("head");
        }
        if self.depth {
            parts.push("depth");
        }
        if self.token {
            parts.push("token");
        }
        if parts.is_empty() {
            write!(f, "none")
        } else {
            write!(f, "{}", parts.join("+"))
        }
    }
}

impl FromStr for DimensionSet {
    type Err = MiaError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "none" || s.is_empty() {
            return Ok(Self::NONE);
        }
        if s == "all" {
            return Ok(Self::ALL);
        }
        let mut out = Self::NONE;
        for part in s.split([',', '+']) {
            match part.trim() {
                "head" | "heads" => out.head = true,
                "depth" | "block" | "blocks" => out.depth = true,
                "token" | "tokens" => out.token = true,
                other => return Err(MiaError::Invalid(format!("unknown dimension {other:?}"))),
            }
        }
        Ok(out)
    }
}

/// Logistic sample `ln u - ln(1-u)`, the difference of two Gumbel variables.
pub fn logistic_noise<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
    u.ln() - (1.0 - u).ln()
}

/// Noise for every decision of one block, drawn in the fixed order block,
/// heads, tokens whether or not the block ends up skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockNoise {
    pub b: f64,
    pub h: Vec<f64>,
    pub n: Vec<f64>,
}

impl BlockNoise {
    pub fn draw<R: Rng + ?Sized>(cfg: &ValidConfig, rng: &mut R) -> Self {
        let b = logistic_noise(rng);
        let h = (0..cfg.num_heads).map(|_| logistic_noise(rng)).collect();
        let n = (0..cfg.num_tokens).map(|_| logistic_noise(rng)).collect();
        Self { b, h, n }
    }

    pub fn zeros(cfg: &ValidConfig) -> Self {
        Self {
            b: 0.0,
            h: vec![0.0; cfg.num_heads],
            n: vec![0.0; cfg.num_tokens],
        }
    }
}

/// The relaxation argument: `(logit + g) / tau` in train mode, `logit` in eval.
pub fn relaxed_arg<T: Scalar>(logit: T, tau: f64, noise: Option<f64>) -> T {
    match noise {
        Some(g) => (logit + T::of(g)) / T::of(tau),
        None => logit,
    }
}

fn decide<T: Scalar>(logit: T, tau: f64, noise: Option<f64>) -> (bool, f64) {
    let x = relaxed_arg(logit, tau, noise);
    (x >= T::zero(), sigmoid(x.as_f64()))
}

/// One binary decision. Returns `(hard, soft)`.
pub fn gumbel_binary<R: Rng + ?Sized>(logit: f64, tau: f64, mode: Mode, rng: &mut R) -> Result<(bool, f64)> {
    if !(tau > 0.0) {
        return Err(MiaError::Invalid(format!("tau must be positive, got {tau}")));
    }
    let noise = match mode {
        Mode::Train => Some(logistic_noise(rng)),
        Mode::Eval => None,
    };
    Ok(decide(logit, tau, noise))
}

/// Which output layers feed the decisions: the supervised branch finals or
/// the stage-3 actors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heads {
    Finals,
    Actors,
}

type Lin<'a, T> = (ArrayView2<'a, T>, ArrayView2<'a, T>);

/// Views of one block's controller tensors.
pub struct ControllerWeights<'a, T> {
    pub conv1: Lin<'a, T>,
    pub conv2: Lin<'a, T>,
    pub fc_h1: Lin<'a, T>,
    pub mlp1: Lin<'a, T>,
    pub mlp2: Lin<'a, T>,
    pub block: Lin<'a, T>,
    pub head: Lin<'a, T>,
    pub token: Lin<'a, T>,
}

pub fn has_rl_heads<T: Scalar>(store: &ParamStore<T>) -> bool {
    store.contains(&ctrl_name(0, "actor_b.weight"))
}

impl<'a, T: Scalar> ControllerWeights<'a, T> {
    pub fn from_store(store: &'a ParamStore<T>, l: usize, heads: Heads) -> Result<Self> {
        let lin = |name: &str| -> Result<Lin<'a, T>> {
            let w = store
                .try_get(&ctrl_name(l, &format!("{name}.weight")))
                .ok_or_else(|| MiaError::Stage(format!("controller tensor ctrl.{l}.{name} missing")))?;
            let b = store.get(&ctrl_name(l, &format!("{name}.bias")));
            Ok((w.view(), b.view()))
        };
        let [fb, fh, fnn] = match heads {
            Heads::Finals => ["fc_b", "fc_h2", "fc_n"],
            Heads::Actors => ["actor_b", "actor_h", "actor_n"],
        };
        Ok(Self {
            conv1: lin("cnn.conv1")?,
            conv2: lin("cnn.conv2")?,
            fc_h1: lin("fc_h1")?,
            mlp1: lin("mlp_n.fc1")?,
            mlp2: lin("mlp_n.fc2")?,
            block: lin(fb)?,
            head: lin(fh)?,
            token: lin(fnn)?,
        })
    }
}

fn im2col<T: Scalar>(x: &Array2<T>, h: usize, w: usize) -> Array2<T> {
    let cin = x.ncols();
    let flat = x.as_slice().expect("standard layout");
    let idx = conv3x3_index(1, h, w, cin);
    let data = idx
        .iter()
        .map(|&i| if i == mia_autograd::PAD { T::zero() } else { flat[i] })
        .collect();
    Array2::from_shape_vec((h * w, 9 * cin), data).unwrap()
}

fn pool<T: Scalar>(x: &Array2<T>, h: usize, w: usize) -> Array2<T> {
    let (groups, _) = pool2x2_groups(1, h, w);
    let mut out = Array2::zeros((groups.len(), x.ncols()));
    for (i, g) in groups.iter().enumerate() {
        let inv = T::one() / T::of(g.len() as f64);
        let mut row = out.row_mut(i);
        for &r in g {
            row += &x.row(r);
        }
        row *= inv;
    }
    out
}

/// Block-branch feature `F_b` of one sample, `(1, W)`. `spatial` is the
/// `(N, H*E)` token matrix in grid order.
pub fn block_features<T: Scalar>(
    cfg: &ValidConfig,
    w: &ControllerWeights<'_, T>,
    spatial: &Array2<T>,
    counter: &FlopCounter,
) -> Array2<T> {
    let [g0, g1, _] = cnn_grids(cfg);
    let mut c1 = linear(&im2col(spatial, g0.0, g0.1).view(), &w.conv1.0, &w.conv1.1, counter);
    relu_inplace(&mut c1);
    let p1 = pool(&c1, g0.0, g0.1);
    let mut c2 = linear(&im2col(&p1, g1.0, g1.1).view(), &w.conv2.0, &w.conv2.1, counter);
    relu_inplace(&mut c2);
    let p2 = pool(&c2, g1.0, g1.1);
    mean_rows(&p2.view())
}

/// Head-branch feature `F_h`, `(H, E'')`.
pub fn head_features<T: Scalar>(
    cfg: &ValidConfig,
    w: &ControllerWeights<'_, T>,
    f_b: &Array2<T>,
    counter: &FlopCounter,
) -> Array2<T> {
    let mut f = linear(&f_b.view(), &w.fc_h1.0, &w.fc_h1.1, counter);
    relu_inplace(&mut f);
    f.into_shape_with_order((cfg.num_heads, cfg.e_dprime)).unwrap()
}

/// Token-branch features `F_n`, `(N, W)`.
pub fn token_features<T: Scalar>(
    w: &ControllerWeights<'_, T>,
    spatial: &Array2<T>,
    counter: &FlopCounter,
) -> Array2<T> {
    let mut f = linear(&spatial.view(), &w.mlp1.0, &w.mlp1.1, counter);
    relu_inplace(&mut f);
    let mut f = linear(&f.view(), &w.mlp2.0, &w.mlp2.1, counter);
    relu_inplace(&mut f);
    f
}

fn logits_of<T: Scalar>(features: &Array2<T>, lin: &Lin<'_, T>, counter: &FlopCounter) -> Vec<T> {
    linear(&features.view(), &lin.0, &lin.1, counter).into_iter().collect()
}

fn decide_all<T: Scalar>(logits: &[T], tau: f64, noise: Option<&[f64]>) -> (Vec<bool>, Vec<f64>) {
    logits
        .iter()
        .enumerate()
        .map(|(i, &l)| decide(l, tau, noise.map(|n| n[i])))
        .unzip()
}

/// Everything the controller computed for one sample and block.
#[derive(Debug, Clone)]
pub struct ControllerOutput<T> {
    pub bundle: MaskBundle,
    pub f_b: Array2<T>,
    pub logit_b: T,
    /// Present only when the block was not skipped.
    pub branches: Option<BranchOutput<T>>,
}

#[derive(Debug, Clone)]
pub struct BranchOutput<T> {
    pub f_h: Array2<T>,
    pub f_n: Array2<T>,
    pub logits_h: Vec<T>,
    pub logits_n: Vec<T>,
}

/// Runs the block decision and, only if the block is kept, the head and token
/// branches. `noise` is required in train mode.
#[allow(clippy::too_many_arguments)]
pub fn controller_step<T: Scalar>(
    cfg: &ValidConfig,
    w: &ControllerWeights<'_, T>,
    spatial: &Array2<T>,
    tau: f64,
    mode: Mode,
    noise: Option<&BlockNoise>,
    dims: DimensionSet,
    counter: &FlopCounter,
) -> Result<ControllerOutput<T>> {
    if !(tau > 0.0) {
        return Err(MiaError::Invalid(format!("tau must be positive, got {tau}")));
    }
    if spatial.dim() != (cfg.num_tokens, cfg.embed_dim) {
        return Err(MiaError::shape(
            "controller input",
            (cfg.num_tokens, cfg.embed_dim),
            spatial.dim(),
        ));
    }
    let noise = match mode {
        Mode::Train => Some(noise.ok_or_else(|| MiaError::Invalid("train mode needs noise".into()))?),
        Mode::Eval => None,
    };
    let f_b = block_features(cfg, w, spatial, counter);
    let logit_b = logits_of(&f_b, &w.block, counter)[0];
    let (mut d_b, g_b) = decide(logit_b, tau, noise.map(|n| n.b));
    if !dims.depth {
        d_b = true;
    }
    if !d_b {
        return Ok(ControllerOutput {
            bundle: MaskBundle::skipped(cfg, g_b),
            f_b,
            logit_b,
            branches: None,
        });
    }
    let f_h = head_features(cfg, w, &f_b, counter);
    let logits_h = logits_of(&f_h, &w.head, counter);
    let (mut d_h, g_h) = decide_all(&logits_h, tau, noise.map(|n| n.h.as_slice()));
    let f_n = token_features(w, spatial, counter);
    let logits_n = logits_of(&f_n, &w.token, counter);
    let (mut d_n, g_n) = decide_all(&logits_n, tau, noise.map(|n| n.n.as_slice()));
    if !dims.head {
        d_h.fill(true);
    }
    if !dims.token {
        d_n.fill(true);
    }
    Ok(ControllerOutput {
        bundle: MaskBundle {
            d_block: d_b,
            g_block: g_b,
            d_heads: d_h,
            g_heads: Some(g_h),
            d_tokens: d_n,
            g_tokens: Some(g_n),
        },
        f_b,
        logit_b,
        branches: Some(BranchOutput {
            f_h,
            f_n,
            logits_h,
            logits_n,
        }),
    })
}

fn spatial_rows<T: Scalar>(cfg: &ValidConfig, x: &crate::backbone::FeatureMap<T>, b: usize) -> Array2<T> {
    x.tokens
        .index_axis(Axis(0), b)
        .to_owned()
        .into_shape_with_order((cfg.num_tokens, cfg.embed_dim))
        .unwrap()
}

fn check_input<T: Scalar>(cfg: &ValidConfig, x: &crate::backbone::FeatureMap<T>) -> Result<()> {
    let (_, nh, nw, c) = x.tokens.dim();
    if (nh, nw, c) != (cfg.grid.0, cfg.grid.1, cfg.embed_dim) {
        return Err(MiaError::shape("feature map", (cfg.grid.0, cfg.grid.1, cfg.embed_dim), (nh, nw, c)));
    }
    Ok(())
}

fn batch_noise<'n>(mode: Mode, noise: Option<&'n [BlockNoise]>, batch: usize) -> Result<Vec<Option<&'n BlockNoise>>> {
    match (mode, noise) {
        (Mode::Eval, _) => Ok(vec![None; batch]),
        (Mode::Train, Some(n)) if n.len() == batch => Ok(n.iter().map(Some).collect()),
        (Mode::Train, _) => Err(MiaError::Invalid("train mode needs one noise record per sample".into())),
    }
}

/// Batched block decision: `(G_b, D_b, F_b)` with `F_b` shaped `(batch, W)`.
pub fn decide_block<T: Scalar>(
    cfg: &ValidConfig,
    x: &crate::backbone::FeatureMap<T>,
    w: &ControllerWeights<'_, T>,
    tau: f64,
    mode: Mode,
    noise: Option<&[BlockNoise]>,
) -> Result<(Vec<f64>, Vec<bool>, Array2<T>)> {
    check_input(cfg, x)?;
    let noise = batch_noise(mode, noise, x.batch())?;
    let counter = FlopCounter::new();
    let mut f = Array2::zeros((x.batch(), cfg.ctrl_width));
    let (mut g, mut d) = (Vec::new(), Vec::new());
    for b in 0..x.batch() {
        let fb = block_features(cfg, w, &spatial_rows(cfg, x, b), &counter);
        let (hard, soft) = decide(logits_of(&fb, &w.block, &counter)[0], tau, noise[b].map(|n| n.b));
        f.row_mut(b).assign(&fb.row(0));
        g.push(soft);
        d.push(hard);
    }
    Ok((g, d, f))
}

/// Batched head decisions from `F_b`: `(G_h, D_h)`, each `(batch, H)`.
pub fn decide_heads<T: Scalar>(
    cfg: &ValidConfig,
    f_b: &Array2<T>,
    w: &ControllerWeights<'_, T>,
    tau: f64,
    mode: Mode,
    noise: Option<&[BlockNoise]>,
) -> Result<(Array2<f64>, Array2<bool>)> {
    if f_b.ncols() != cfg.ctrl_width {
        return Err(MiaError::shape("F_b", cfg.ctrl_width, f_b.ncols()));
    }
    let noise = batch_noise(mode, noise, f_b.nrows())?;
    let counter = FlopCounter::new();
    let mut g = Array2::zeros((f_b.nrows(), cfg.num_heads));
    let mut d = Array2::from_elem((f_b.nrows(), cfg.num_heads), false);
    for b in 0..f_b.nrows() {
        let fh = head_features(cfg, w, &f_b.row(b).to_owned().insert_axis(Axis(0)), &counter);
        let (hard, soft) = decide_all(&logits_of(&fh, &w.head, &counter), tau, noise[b].map(|n| n.h.as_slice()));
        for h in 0..cfg.num_heads {
            g[[b, h]] = soft[h];
            d[[b, h]] = hard[h];
        }
    }
    Ok((g, d))
}

/// Batched token decisions: `(G_n, D_n)`, each `(batch, N)`.
pub fn decide_tokens<T: Scalar>(
    cfg: &ValidConfig,
    x: &crate::backbone::FeatureMap<T>,
    w: &ControllerWeights<'_, T>,
    tau: f64,
    mode: Mode,
    noise: Option<&[BlockNoise]>,
) -> Result<(Array2<f64>, Array2<bool>)> {
    check_input(cfg, x)?;
    let noise = batch_noise(mode, noise, x.batch())?;
    let counter = FlopCounter::new();
    let mut g = Array2::zeros((x.batch(), cfg.num_tokens));
    let mut d = Array2::from_elem((x.batch(), cfg.num_tokens), false);
    for b in 0..x.batch() {
        let fnn = token_features(w, &spatial_rows(cfg, x, b), &counter);
        let (hard, soft) = decide_all(&logits_of(&fnn, &w.token, &counter), tau, noise[b].map(|n| n.n.as_slice()));
        for n in 0..cfg.num_tokens {
            g[[b, n]] = soft[n];
            d[[b, n]] = hard[n];
        }
    }
    Ok((g, d))
}

/// Decision dimension served by one actor/critic pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dim {
    Block,
    Head,
    Token,
}

impl Dim {
    pub const ALL: [Dim; 3] = [Dim::Block, Dim::Head, Dim::Token];

    pub fn suffix(self) -> &'static str {
        match self {
            Dim::Block => "b",
            Dim::Head => "h",
            Dim::Token => "n",
        }
    }
}

/// Actor/critic output for one (block, dimension) decision group.
#[derive(Debug, Clone, PartialEq)]
pub struct A2cDecision {
    pub actions: Vec<bool>,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub entropies: Vec<f64>,
    pub value: f64,
}

fn bernoulli_log_prob(logit: f64, action: bool) -> f64 {
    use mia_autograd::softplus;
    if action {
        -softplus(-logit)
    } else {
        -softplus(logit)
    }
}

fn bernoulli_entropy(logit: f64) -> f64 {
    mia_autograd::softplus(-logit) + (1.0 - sigmoid(logit)) * logit
}

/// Critic input of each dimension: `F_b`, the flattened `F_h`, and the mean
/// of `F_n` over tokens.
pub fn critic_input<T: Scalar>(dim: Dim, features: &Array2<T>) -> Array2<T> {
    match dim {
        Dim::Block => features.clone(),
        Dim::Head => {
            let n = features.len();
            features.as_standard_layout().into_owned().into_shape_with_order((1, n)).unwrap()
        }
        Dim::Token => mean_rows(&features.view()),
    }
}

/// Actor/critic decisions for one dimension of one block. `features` is the
/// branch feature the actor reads per decision: `F_b` (1 row), `F_h` (H rows)
/// or `F_n` (N rows). Train mode samples each action from
/// `Bernoulli(sigmoid(logit))` via logistic noise; eval keeps iff `logit >= 0`.
pub fn a2c_decide<T: Scalar, R: Rng + ?Sized>(
    store: &ParamStore<T>,
    l: usize,
    dim: Dim,
    features: &Array2<T>,
    mode: Mode,
    rng: &mut R,
) -> Result<A2cDecision> {
    let get = |name: String| {
        store
            .try_get(&name)
            .ok_or_else(|| MiaError::Stage(format!("{name} missing: stage-3 heads not installed")))
    };
    let s = dim.suffix();
    let aw = get(ctrl_name(l, &format!("actor_{s}.weight")))?;
    let ab = get(ctrl_name(l, &format!("actor_{s}.bias")))?;
    let cw = get(ctrl_name(l, &format!("critic_{s}.weight")))?;
    let cb = get(ctrl_name(l, &format!("critic_{s}.bias")))?;
    let counter = FlopCounter::new();
    let logits = linear(&features.view(), &aw.view(), &ab.view(), &counter);
    let value = linear(&critic_input(dim, features).view(), &cw.view(), &cb.view(), &counter)[[0, 0]].as_f64();
    let mut out = A2cDecision {
        actions: Vec::new(),
        probs: Vec::new(),
        log_probs: Vec::new(),
        entropies: Vec::new(),
        value,
    };
    for &l in logits.iter() {
        let noise = match mode {
            Mode::Train => Some(logistic_noise(rng)),
            Mode::Eval => None,
        };
        let action = relaxed_arg(l, 1.0, noise) >= T::zero();
        let lf = l.as_f64();
        out.actions.push(action);
        out.probs.push(sigmoid(lf));
        out.log_probs.push(bernoulli_log_prob(lf, action));
        out.entropies.push(bernoulli_entropy(lf));
    }
    Ok(out)
}

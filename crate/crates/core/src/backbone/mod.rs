//! The masked transformer backbone.
//!
//! Two routes compute the same function. The inference route here compacts
//! every block to its active tokens and head channel groups (masked parts are
//! never touched, the residual carries them through unchanged). The graph
//! route in [`graph`] evaluates the block densely on the autodiff tape and
//! multiplies by the masks, so mask gradients exist for straight-through
//! training and input-gradient attacks.

pub mod graph;

use mia_autograd::Scalar;
use ndarray::{s, Array2, Array4, ArrayView1, ArrayView2, Axis};

use crate::config::ValidConfig;
use crate::controller::MaskBundle;
use crate::error::{MiaError, Result};
use crate::geometry::patch_pixel;
use crate::numerics::{gelu_inplace, layer_norm, linear, matmul, mean_rows, softmax_rows_inplace, FlopCounter};
use crate::params::{block_name, ParamStore};

/// Inter-block representation: spatial tokens `(batch, N_h, N_w, H*E)` plus
/// an optional class-token row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub tokens: Array4<T>,
    pub cls: Option<Array2<T>>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn batch(&self) -> usize {
        self.tokens.dim().0
    }

    /// Token matrix of one sample, `(seq_len, H*E)`, class token first.
    pub fn sample_matrix(&self, b: usize) -> Array2<T> {
        let (_, nh, nw, c) = self.tokens.dim();
        let spatial = self
            .tokens
            .index_axis(Axis(0), b)
            .to_owned()
            .into_shape_with_order((nh * nw, c))
            .expect("contiguous");
        match &self.cls {
            Some(cls) => {
                let row = cls.slice(s![b..b + 1, ..]);
                ndarray::concatenate(Axis(0), &[row, spatial.view()]).unwrap()
            }
            None => spatial,
        }
    }

    pub fn from_sample_matrices(cfg: &ValidConfig, samples: &[Array2<T>]) -> Self {
        let (nh, nw) = cfg.grid;
        let c = cfg.embed_dim;
        let off = usize::from(cfg.use_class_token);
        let mut tokens = Array4::zeros((samples.len(), nh, nw, c));
        let mut cls = cfg.use_class_token.then(|| Array2::zeros((samples.len(), c)));
        for (b, m) in samples.iter().enumerate() {
            let spatial = m.slice(s![off.., ..]).to_owned().into_shape_with_order((nh, nw, c)).unwrap();
            tokens.index_axis_mut(Axis(0), b).assign(&spatial);
            if let Some(cls) = cls.as_mut() {
                cls.row_mut(b).assign(&m.row(0));
            }
        }
        FeatureMap { tokens, cls }
    }

    pub fn all_finite(&self) -> bool {
        self.tokens.iter().all(|v| v.is_finite())
            && self.cls.as_ref().is_none_or(|c| c.iter().all(|v| v.is_finite()))
    }
}

/// Views of one block's parameters. Linear layers are `(in, out)`; head `g`
/// owns channels `[g*E, (g+1)*E)` and MLP hidden units `[g*rE, (g+1)*rE)`.
pub struct BlockWeights<'a, T> {
    pub norm1: (ArrayView2<'a, T>, ArrayView2<'a, T>),
    pub q: (ArrayView2<'a, T>, ArrayView2<'a, T>),
    pub k: (ArrayView2<'a, T>, ArrayView2<'a, T>),
    pub v: (ArrayView2<'a, T>, ArrayView2<'a, T>),
    pub proj: (ArrayView2<'a, T>, ArrayView2<'a, T>),
    pub norm2: (ArrayView2<'a, T>, ArrayView2<'a, T>),
    pub fc1: (ArrayView2<'a, T>, ArrayView2<'a, T>),
    pub fc2: (ArrayView2<'a, T>, ArrayView2<'a, T>),
}

impl<'a, T: Scalar> BlockWeights<'a, T> {
    pub fn from_store(store: &'a ParamStore<T>, l: usize) -> Self {
        let pair = |a: &str, b: &str| {
            (
                store.get(&block_name(l, a)).view(),
                store.get(&block_name(l, b)).view(),
            )
        };
        Self {
            norm1: pair("norm1.gamma", "norm1.beta"),
            q: pair("attn.q.weight", "attn.q.bias"),
            k: pair("attn.k.weight", "attn.k.bias"),
            v: pair("attn.v.weight", "attn.v.bias"),
            proj: pair("attn.proj.weight", "attn.proj.bias"),
            norm2: pair("norm2.gamma", "norm2.beta"),
            fc1: pair("mlp.fc1.weight", "mlp.fc1.bias"),
            fc2: pair("mlp.fc2.weight", "mlp.fc2.bias"),
        }
    }
}

fn check_images<T>(cfg: &ValidConfig, images: &Array4<T>) -> Result<()> {
    let (_, c, h, w) = images.dim();
    if (c, h, w) != (cfg.in_channels, cfg.image_size, cfg.image_size) {
        return Err(MiaError::shape(
            "images",
            (cfg.in_channels, cfg.image_size, cfg.image_size),
            (c, h, w),
        ));
    }
    Ok(())
}

/// Embed one flattened `(c, y, x)` image into its token matrix.
pub fn embed_sample<T: Scalar>(
    cfg: &ValidConfig,
    store: &ParamStore<T>,
    image: ArrayView1<'_, T>,
    counter: &FlopCounter,
) -> Array2<T> {
    let patches = Array2::from_shape_fn((cfg.num_tokens, cfg.patch_dim), |(n, k)| {
        image[patch_pixel(cfg, n, k)]
    });
    let mut spatial = linear(
        &patches.view(),
        &store.get("embed.patch.weight").view(),
        &store.get("embed.patch.bias").view(),
        counter,
    );
    spatial += store.get("embed.pos");
    if cfg.use_class_token {
        let cls = store.get("embed.cls") + store.get("embed.cls_pos");
        ndarray::concatenate(Axis(0), &[cls.view(), spatial.view()]).unwrap()
    } else {
        spatial
    }
}

pub fn patch_embed<T: Scalar>(cfg: &ValidConfig, store: &ParamStore<T>, images: &Array4<T>) -> Result<FeatureMap<T>> {
    check_images(cfg, images)?;
    let counter = FlopCounter::new();
    let flat = flatten_images(images);
    let samples: Vec<Array2<T>> = flat
        .rows()
        .into_iter()
        .map(|row| embed_sample(cfg, store, row, &counter))
        .collect();
    Ok(FeatureMap::from_sample_matrices(cfg, &samples))
}

/// `(batch, c, h, w)` -> `(batch, c*h*w)`.
pub fn flatten_images<T: Scalar>(images: &Array4<T>) -> Array2<T> {
    let (b, c, h, w) = images.dim();
    images
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((b, c * h * w))
        .unwrap()
}

/// One masked block applied to one sample's token matrix.
///
/// Only active tokens (plus the class token) and active head groups enter any
/// linear layer or the attention; everything else keeps its input value.
pub fn block_forward_sample<T: Scalar>(
    cfg: &ValidConfig,
    w: &BlockWeights<'_, T>,
    x: &Array2<T>,
    mask: &MaskBundle,
    counter: &FlopCounter,
) -> Array2<T> {
    if !mask.d_block {
        return x.clone();
    }
    let e = cfg.head_dim;
    let rg = cfg.mlp_group;
    let heads: Vec<usize> = (0..cfg.num_heads).filter(|&g| mask.d_heads[g]).collect();
    let mut rows: Vec<usize> = Vec::with_capacity(cfg.seq_len);
    if cfg.use_class_token {
        rows.push(0);
    }
    rows.extend((0..cfg.num_tokens).filter(|&n| mask.d_tokens[n]).map(|n| cfg.token_row(n)));
    if heads.is_empty() || rows.is_empty() {
        return x.clone();
    }
    let cols: Vec<usize> = heads.iter().flat_map(|&g| g * e..(g + 1) * e).collect();
    let hidden: Vec<usize> = heads.iter().flat_map(|&g| g * rg..(g + 1) * rg).collect();
    let sub = |m: &ArrayView2<'_, T>, r: &[usize], c: &[usize]| m.select(Axis(0), r).select(Axis(1), c);
    let bias = |m: &ArrayView2<'_, T>, c: &[usize]| m.select(Axis(1), c);

    let xa = x.select(Axis(0), &rows);
    let xn = layer_norm(&xa.view(), &w.norm1.0, &w.norm1.1);
    let xin = xn.select(Axis(1), &cols);
    let q = linear(&xin.view(), &sub(&w.q.0, &cols, &cols).view(), &bias(&w.q.1, &cols).view(), counter);
    let k = linear(&xin.view(), &sub(&w.k.0, &cols, &cols).view(), &bias(&w.k.1, &cols).view(), counter);
    let v = linear(&xin.view(), &sub(&w.v.0, &cols, &cols).view(), &bias(&w.v.1, &cols).view(), counter);
    let scale = T::one() / T::of(e as f64).sqrt();
    let mut heads_out = Array2::zeros((rows.len(), cols.len()));
    for j in 0..heads.len() {
        let span = s![.., j * e..(j + 1) * e];
        let mut scores = matmul(&q.slice(span), &k.slice(span).t(), counter);
        scores *= scale;
        softmax_rows_inplace(&mut scores);
        heads_out
            .slice_mut(span)
            .assign(&matmul(&scores.view(), &v.slice(span), counter));
    }
    let attn = linear(
        &heads_out.view(),
        &sub(&w.proj.0, &cols, &cols).view(),
        &bias(&w.proj.1, &cols).view(),
        counter,
    );
    let mut x1 = xa;
    for (j, &c) in cols.iter().enumerate() {
        let mut col = x1.column_mut(c);
        col += &attn.column(j);
    }
    let xn2 = layer_norm(&x1.view(), &w.norm2.0, &w.norm2.1);
    let mut h1 = linear(
        &xn2.select(Axis(1), &cols).view(),
        &sub(&w.fc1.0, &cols, &hidden).view(),
        &bias(&w.fc1.1, &hidden).view(),
        counter,
    );
    gelu_inplace(&mut h1);
    let m = linear(
        &h1.view(),
        &sub(&w.fc2.0, &hidden, &cols).view(),
        &bias(&w.fc2.1, &cols).view(),
        counter,
    );
    for (j, &c) in cols.iter().enumerate() {
        let mut col = x1.column_mut(c);
        col += &m.column(j);
    }
    let mut out = x.clone();
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(r).assign(&x1.row(i));
    }
    out
}

pub fn masked_block_forward<T: Scalar>(
    cfg: &ValidConfig,
    x: &FeatureMap<T>,
    masks: &[MaskBundle],
    w: &BlockWeights<'_, T>,
) -> Result<FeatureMap<T>> {
    if masks.len() != x.batch() {
        return Err(MiaError::shape("mask bundles", x.batch(), masks.len()));
    }
    for m in masks {
        m.check_shape(cfg)?;
    }
    let counter = FlopCounter::new();
    let out: Vec<Array2<T>> = masks
        .iter()
        .enumerate()
        .map(|(b, m)| block_forward_sample(cfg, w, &x.sample_matrix(b), m, &counter))
        .collect();
    Ok(FeatureMap::from_sample_matrices(cfg, &out))
}

/// Final norm and linear head: class token, or the spatial mean without one.
pub fn classify_sample<T: Scalar>(
    cfg: &ValidConfig,
    store: &ParamStore<T>,
    x: &Array2<T>,
    counter: &FlopCounter,
) -> Array2<T> {
    let pooled = if cfg.use_class_token {
        x.slice(s![0..1, ..]).to_owned()
    } else {
        mean_rows(&x.view())
    };
    let normed = layer_norm(
        &pooled.view(),
        &store.get("norm.gamma").view(),
        &store.get("norm.beta").view(),
    );
    linear(
        &normed.view(),
        &store.get("head.weight").view(),
        &store.get("head.bias").view(),
        counter,
    )
}

pub fn classify<T: Scalar>(cfg: &ValidConfig, store: &ParamStore<T>, x: &FeatureMap<T>) -> Array2<T> {
    let counter = FlopCounter::new();
    let mut logits = Array2::zeros((x.batch(), cfg.num_classes));
    for b in 0..x.batch() {
        let row = classify_sample(cfg, store, &x.sample_matrix(b), &counter);
        logits.row_mut(b).assign(&row.row(0));
    }
    logits
}

/// Plain ViT forward with no masking machinery at all; the reference the
/// dynamic model must reproduce when every mask is on.
pub fn dense_reference_forward<T: Scalar>(cfg: &ValidConfig, store: &ParamStore<T>, images: &Array4<T>) -> Result<Array2<T>> {
    check_images(cfg, images)?;
    let counter = FlopCounter::new();
    let flat = flatten_images(images);
    let e = cfg.head_dim;
    let scale = T::one() / T::of(e as f64).sqrt();
    let mut logits = Array2::zeros((flat.nrows(), cfg.num_classes));
    for (b, image) in flat.rows().into_iter().enumerate() {
        let mut x = embed_sample(cfg, store, image, &counter);
        for l in 0..cfg.num_blocks {
            let w = BlockWeights::from_store(store, l);
            let xn = layer_norm(&x.view(), &w.norm1.0, &w.norm1.1);
            let q = linear(&xn.view(), &w.q.0, &w.q.1, &counter);
            let k = linear(&xn.view(), &w.k.0, &w.k.1, &counter);
            let v = linear(&xn.view(), &w.v.0, &w.v.1, &counter);
            let mut o = Array2::zeros(x.dim());
            for h in 0..cfg.num_heads {
                let span = s![.., h * e..(h + 1) * e];
                let mut a = q.slice(span).dot(&k.slice(span).t()) * scale;
                softmax_rows_inplace(&mut a);
                o.slice_mut(span).assign(&a.dot(&v.slice(span)));
            }
            x = x + linear(&o.view(), &w.proj.0, &w.proj.1, &counter);
            let xn2 = layer_norm(&x.view(), &w.norm2.0, &w.norm2.1);
            let mut h1 = linear(&xn2.view(), &w.fc1.0, &w.fc1.1, &counter);
            gelu_inplace(&mut h1);
            x = x + linear(&h1.view(), &w.fc2.0, &w.fc2.1, &counter);
        }
        logits.row_mut(b).assign(&classify_sample(cfg, store, &x, &counter).row(0));
    }
    Ok(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::MiaConfig;
    use crate::params::init_model;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ValidConfig, ParamStore<f64>) {
        let cfg = MiaConfig::tiny_vit().validate().unwrap();
        let mut store: ParamStore<f64> = init_model(&cfg, 3);
        // larger weights so masking has visible effects
        for (_, t) in store.iter_mut() {
            t.mapv_inplace(|v| v * 5.0);
        }
        (cfg, store)
    }

    fn images(cfg: &ValidConfig, b: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((b, cfg.in_channels, cfg.image_size, cfg.image_size), |_| rng.random())
    }

    #[test]
    fn patch_embed_shape() {
        let (cfg, store) = setup();
        let fm = patch_embed(&cfg, &store, &images(&cfg, 2, 1)).unwrap();
        assert_eq!(fm.tokens.dim(), (2, 4, 4, 64));
        assert_eq!(fm.cls.as_ref().unwrap().dim(), (2, 64));
    }

    #[test]
    fn patch_embed_zero() {
        let (cfg, store) = setup();
        let zero = store.zeros_like();
        let fm = patch_embed(&cfg, &zero, &Array4::zeros((2, 3, 32, 32))).unwrap();
        assert!(fm.tokens.iter().all(|&v| v == 0.0));
        assert!(fm.cls.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_embed_matches_sliding_window() {
        let (cfg, store) = setup();
        let imgs = images(&cfg, 2, 9);
        let fm = patch_embed(&cfg, &store, &imgs).unwrap();
        let w = store.get("embed.patch.weight");
        let bias = store.get("embed.patch.bias");
        let pos = store.get("embed.pos");
        let p = cfg.patch_size;
        for b in 0..2 {
            for py in 0..4 {
                for px in 0..4 {
                    for ch in 0..64 {
                        let mut acc = bias[[0, ch]] + pos[[py * 4 + px, ch]];
                        let mut k = 0;
                        for c in 0..3 {
                            for dy in 0..p {
                                for dx in 0..p {
                                    acc += imgs[[b, c, py * p + dy, px * p + dx]] * w[[k, ch]];
                                    k += 1;
                                }
                            }
                        }
                        assert!((fm.tokens[[b, py, px, ch]] - acc).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn patch_embed_rejects_wrong_size() {
        let (cfg, store) = setup();
        assert!(patch_embed(&cfg, &store, &Array4::zeros((1, 3, 16, 16))).is_err());
    }

    fn block_input(cfg: &ValidConfig, store: &ParamStore<f64>) -> FeatureMap<f64> {
        patch_embed(cfg, store, &images(cfg, 2, 4)).unwrap()
    }

    #[test]
    fn all_on_block_equals_dense_block() {
        let (cfg, store) = setup();
        let x = block_input(&cfg, &store);
        let w = BlockWeights::from_store(&store, 0);
        let on = vec![MaskBundle::all_on(&cfg); 2];
        let y = masked_block_forward(&cfg, &x, &on, &w).unwrap();
        // dense block computed inline
        let e = cfg.head_dim;
        let c = FlopCounter::new();
        for b in 0..2 {
            let xs = x.sample_matrix(b);
            let xn = layer_norm(&xs.view(), &w.norm1.0, &w.norm1.1);
            let q = linear(&xn.view(), &w.q.0, &w.q.1, &c);
            let k = linear(&xn.view(), &w.k.0, &w.k.1, &c);
            let v = linear(&xn.view(), &w.v.0, &w.v.1, &c);
            let mut o = Array2::zeros(xs.dim());
            for h in 0..4 {
                let span = s![.., h * e..(h + 1) * e];
                let mut a = q.slice(span).dot(&k.slice(span).t()) / (e as f64).sqrt();
                softmax_rows_inplace(&mut a);
                o.slice_mut(span).assign(&a.dot(&v.slice(span)));
            }
            let x1 = &xs + &linear(&o.view(), &w.proj.0, &w.proj.1, &c);
            let xn2 = layer_norm(&x1.view(), &w.norm2.0, &w.norm2.1);
            let mut h1 = linear(&xn2.view(), &w.fc1.0, &w.fc1.1, &c);
            gelu_inplace(&mut h1);
            let x2 = &x1 + &linear(&h1.view(), &w.fc2.0, &w.fc2.1, &c);
            let got = y.sample_matrix(b);
            let err = (&got - &x2).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(err < 1e-12, "{err}");
        }
    }

    #[test]
    fn skipped_block_is_identity() {
        let (cfg, store) = setup();
        let x = block_input(&cfg, &store);
        let w = BlockWeights::from_store(&store, 1);
        let skip = vec![MaskBundle::skipped(&cfg, 0.2); 2];
        let y = masked_block_forward(&cfg, &x, &skip, &w).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn masked_positions_pass_through() {
        let (cfg, store) = setup();
        let x = block_input(&cfg, &store);
        let w = BlockWeights::from_store(&store, 2);
        let mut m = MaskBundle::all_on(&cfg);
        m.d_heads = vec![true, true, false, false];
        m.d_tokens = (0..16).map(|n| n % 2 == 0).collect();
        let y = masked_block_forward(&cfg, &x, &[m.clone(), m.clone()], &w).unwrap();
        for b in 0..2 {
            let (xi, yo) = (x.sample_matrix(b), y.sample_matrix(b));
            for n in 0..16 {
                let r = cfg.token_row(n);
                if !m.d_tokens[n] {
                    assert_eq!(xi.row(r), yo.row(r));
                } else {
                    assert_eq!(xi.slice(s![r, 32..]), yo.slice(s![r, 32..]));
                    assert_ne!(xi.slice(s![r, ..32]), yo.slice(s![r, ..32]));
                }
            }
        }
    }

    #[test]
    fn masked_token_content_is_invisible() {
        let (cfg, store) = setup();
        let w = BlockWeights::from_store(&store, 0);
        let x = block_input(&cfg, &store);
        let mut m = MaskBundle::all_on(&cfg);
        m.d_tokens[3] = false;
        m.d_tokens[7] = false;
        let y1 = block_forward_sample(&cfg, &w, &x.sample_matrix(0), &m, &FlopCounter::new());
        let mut perturbed = x.sample_matrix(0);
        perturbed.row_mut(cfg.token_row(3)).mapv_inplace(|v| v * -7.0 + 1.0);
        perturbed.row_mut(cfg.token_row(7)).fill(100.0);
        let y2 = block_forward_sample(&cfg, &w, &perturbed, &m, &FlopCounter::new());
        for n in (0..16).filter(|&n| m.d_tokens[n]) {
            assert_eq!(y1.row(cfg.token_row(n)), y2.row(cfg.token_row(n)));
        }
        assert_eq!(y1.row(0), y2.row(0));
    }

    #[test]
    fn zero_block_weights_leave_residual() {
        let (cfg, store) = setup();
        let mut zeroed = store.clone();
        for (name, t) in zeroed.iter_mut() {
            if name.starts_with("blocks.0.") && !name.contains("norm") {
                t.fill(0.0);
            }
        }
        let x = block_input(&cfg, &store);
        let w = BlockWeights::from_store(&zeroed, 0);
        let y = masked_block_forward(&cfg, &x, &vec![MaskBundle::all_on(&cfg); 2], &w).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn classify_shapes_and_oracle() {
        let (cfg, store) = setup();
        let x = block_input(&cfg, &store);
        let logits = classify(&cfg, &store, &x);
        assert_eq!(logits.dim(), (2, 10));
        let zero = store.zeros_like();
        let zfm = FeatureMap {
            tokens: Array4::zeros((2, 4, 4, 64)),
            cls: Some(Array2::zeros((2, 64))),
        };
        assert!(classify(&cfg, &zero, &zfm).iter().all(|&v| v == 0.0));
        // hand-rolled: layer norm of the class token, then dot products
        let g = store.get("norm.gamma");
        let bt = store.get("norm.beta");
        let hw = store.get("head.weight");
        let hb = store.get("head.bias");
        for b in 0..2 {
            let row: Vec<f64> = x.cls.as_ref().unwrap().row(b).to_vec();
            let mean = row.iter().sum::<f64>() / 64.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
            let normed: Vec<f64> = (0..64)
                .map(|i| (row[i] - mean) / (var + 1e-6).sqrt() * g[[0, i]] + bt[[0, i]])
                .collect();
            for k in 0..10 {
                let want = hb[[0, k]] + (0..64).map(|i| normed[i] * hw[[i, k]]).sum::<f64>();
                assert!((logits[[b, k]] - want).abs() < 1e-10);
            }
        }
    }
}

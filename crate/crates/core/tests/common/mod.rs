//! Oracles shared by the integration tests and the acceptance suite.

#![allow(dead_code)]

use mia_autograd::{sigmoid, Tape, Var};
use mia_former::backbone::graph::{block, classify, embed, spatial_rows, BlockMasks};
use mia_former::config::{MiaConfig, ValidConfig};
use mia_former::controller::graph::controller_logits;
use mia_former::controller::{BlockNoise, DimensionSet, Heads};
use mia_former::model::{batch_noise, forward_graph, GraphPolicy};
use mia_former::params::{init_model, Bound, ParamStore};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Block,
    Head,
    Token,
}

/// One controller logit: block, kind, sample, column.
#[derive(Debug, Clone, Copy)]
pub struct LogitRef {
    pub block: usize,
    pub kind: Kind,
    pub sample: usize,
    pub col: usize,
}

/// Hard decisions and pre-noise arguments of the unperturbed pass.
struct Frozen {
    hard: Vec<[Array2<f64>; 3]>,
    arg0: Vec<[Array2<f64>; 3]>,
}

pub struct StProblem {
    pub cfg: ValidConfig,
    pub store: ParamStore<f64>,
    pub images: Array2<f64>,
    pub labels: Vec<usize>,
    pub noise: Vec<Vec<BlockNoise>>,
    pub tau: f64,
}

impl StProblem {
    pub fn new(seed: u64) -> Self {
        let cfg = MiaConfig::tiny_vit().validate().unwrap();
        let mut store: ParamStore<f64> = init_model(&cfg, seed);
        for (name, t) in store.iter_mut() {
            if !name.starts_with("ctrl.") {
                t.mapv_inplace(|v| v * 4.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let batch = 3;
        let images = Array2::from_shape_fn((batch, cfg.image_len), |_| rng.random::<f64>());
        let labels = (0..batch).map(|_| rng.random_range(0..cfg.num_classes)).collect();
        let ids: Vec<u64> = (0..batch as u64).collect();
        let noise = batch_noise(&cfg, seed, 1, &ids);
        Self {
            cfg,
            store,
            images,
            labels,
            noise,
            tau: 1.5,
        }
    }

    fn kinds(g: &mia_former::controller::graph::CtrlGraph) -> [Var; 3] {
        [g.logit_b, g.logit_h, g.logit_n]
    }

    /// Loss, logit gradients and the frozen decisions of the real tape route.
    fn analytic(&self) -> (f64, Vec<[Array2<f64>; 3]>, Frozen) {
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &self.store, &|_| true);
        let x = tape.constant(self.images.clone());
        let policy = GraphPolicy::Relaxed {
            tau: self.tau,
            noise: Some(&self.noise),
            dims: DimensionSet::ALL,
            heads: Heads::Finals,
        };
        let out = forward_graph(&mut tape, &p, &self.cfg, x, self.images.nrows(), policy);
        let ce = tape.cross_entropy(out.logits, &self.labels);
        let loss = tape.mean_all(ce);
        let grads = tape.backward(loss);
        let mut g = Vec::new();
        let mut frozen = Frozen {
            hard: Vec::new(),
            arg0: Vec::new(),
        };
        for blk in &out.blocks {
            let c = blk.ctrl.expect("relaxed route records the controller");
            let m = blk.masks.as_ref().unwrap();
            let vars = Self::kinds(&c);
            g.push(vars.map(|v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(tape.shape(v)))
            }));
            frozen.hard.push([m.hard_b.clone(), m.hard_h.clone(), m.hard_n.clone()]);
            frozen.arg0.push(vars.map(|v| tape.value(v).clone()));
        }
        (tape.value(loss)[[0, 0]], g, frozen)
    }

    fn pick<'a>(n: &'a BlockNoise, k: usize) -> Vec<f64> {
        match k {
            0 => vec![n.b],
            1 => n.h.clone(),
            _ => n.n.clone(),
        }
    }

    /// The relaxed forward with hard decisions frozen: each mask is
    /// `hard0 + sigmoid(arg) - sigmoid(arg0)`, so its value and slope at the
    /// unperturbed point are the straight-through ones. `bump` shifts one
    /// logit.
    fn surrogate(&self, frozen: &Frozen, bump: Option<(LogitRef, f64)>) -> f64 {
        let cfg = &self.cfg;
        let batch = self.images.nrows();
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &self.store, &|_| false);
        let images = tape.constant(self.images.clone());
        let mut x = embed(&mut tape, &p, cfg, images, batch);
        let idx = spatial_rows(cfg, batch);
        for l in 0..cfg.num_blocks {
            let spatial = tape.gather_rows(x, &idx);
            let c = controller_logits(&mut tape, &p, cfg, l, spatial, batch, Heads::Finals);
            let hard_b = &frozen.hard[l][0];
            let mut masks = Vec::with_capacity(3);
            for (k, logit) in Self::kinds(&c).into_iter().enumerate() {
                let (rows, cols) = tape.shape(logit);
                let mut shift = Array2::from_shape_fn((rows, cols), |(s, j)| Self::pick(&self.noise[s][l], k)[j]);
                if let Some((r, d)) = bump {
                    let rk = match r.kind {
                        Kind::Block => 0,
                        Kind::Head => 1,
                        Kind::Token => 2,
                    };
                    if r.block == l && rk == k {
                        shift[[r.sample, r.col]] += d;
                    }
                }
                let shifted = tape.add_const(logit, &shift);
                let arg = tape.div_scalar(shifted, self.tau);
                let soft = tape.sigmoid(arg);
                let g0 = Array2::from_shape_fn((rows, cols), |(s, j)| {
                    let a0 = (frozen.arg0[l][k][[s, j]] + Self::pick(&self.noise[s][l], k)[j]) / self.tau;
                    frozen.hard[l][k][[s, j]] - sigmoid(a0)
                });
                let mut m = tape.add_const(soft, &g0);
                if k > 0 {
                    let keep = tape.constant(hard_b.clone());
                    m = tape.mul_broadcast(m, keep);
                    let fill = Array2::from_shape_fn((rows, cols), |(s, _)| 1.0 - hard_b[[s, 0]]);
                    m = tape.add_const(m, &fill);
                }
                masks.push(m);
            }
            let rm = BlockMasks::from_sample_masks(&mut tape, cfg, batch, masks[0], masks[1], masks[2]);
            x = block(&mut tape, &p, cfg, l, x, batch, Some(&rm));
        }
        let logits = classify(&mut tape, &p, cfg, x, batch);
        let ce = tape.cross_entropy(logits, &self.labels);
        let loss = tape.mean_all(ce);
        tape.value(loss)[[0, 0]]
    }

    /// Analytic against central-difference gradients on `count` random
    /// controller logits: `(logit, analytic, numeric)`.
    pub fn compare(&self, count: usize, seed: u64) -> Vec<(LogitRef, f64, f64)> {
        let (loss, grads, frozen) = self.analytic();
        let base = self.surrogate(&frozen, None);
        assert!((base - loss).abs() <= 1e-12 * loss.abs().max(1.0), "surrogate {base} vs route {loss}");
        let mut all = Vec::new();
        for l in 0..self.cfg.num_blocks {
            for (k, kind) in [Kind::Block, Kind::Head, Kind::Token].into_iter().enumerate() {
                let (rows, cols) = grads[l][k].dim();
                for s in 0..rows {
                    for j in 0..cols {
                        all.push(LogitRef {
                            block: l,
                            kind,
                            sample: s,
                            col: j,
                        });
                    }
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-5;
        (0..count)
            .map(|_| {
                let r = all[rng.random_range(0..all.len())];
                let k = match r.kind {
                    Kind::Block => 0,
                    Kind::Head => 1,
                    Kind::Token => 2,
                };
                let an = grads[r.block][k][[r.sample, r.col]];
                let up = self.surrogate(&frozen, Some((r, h)));
                let down = self.surrogate(&frozen, Some((r, -h)));
                (r, an, (up - down) / (2.0 * h))
            })
            .collect()
    }
}

/// Relative error with a floor under the denominator, so gradients that
/// are zero on both sides compare as equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-9)
}

//! Controller on the autodiff tape, batched over samples.

use mia_autograd::{Scalar, Tape, Var};
use ndarray::Array2;

use super::{BlockNoise, DimensionSet, Heads, MaskBundle};
use crate::config::ValidConfig;
use crate::geometry::{cnn_grids, conv3x3_index, pool2x2_groups};
use crate::params::{ctrl_name, Bound};

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, (w, b): (Var, Var)) -> Var {
    let y = tape.matmul(x, w);
    tape.add_broadcast(y, b)
}

/// Logits and branch features of one block for a batch.
#[derive(Debug, Clone, Copy)]
pub struct CtrlGraph {
    pub logit_b: Var,
    pub logit_h: Var,
    pub logit_n: Var,
    /// `(batch, W)`
    pub f_b: Var,
    /// `(batch*H, E'')`, the actor input of the head dimension.
    pub f_h: Var,
    /// `(batch, H*E'')`
    pub f_h_flat: Var,
    /// `(batch*N, W)`
    pub f_n: Var,
    /// `(batch, W)`, mean of the token features per sample.
    pub f_n_mean: Var,
}

/// Runs the controller of block `l` on stacked spatial token rows
/// `(batch*N, H*E)`.
pub fn controller_logits<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ValidConfig,
    l: usize,
    spatial: Var,
    batch: usize,
    heads: Heads,
) -> CtrlGraph {
    let name = |s: &str| ctrl_name(l, s);
    let (c, w) = (cfg.embed_dim, cfg.ctrl_width);
    let [g0, g1, g2] = cnn_grids(cfg);
    let col = tape.gather(
        spatial,
        conv3x3_index(batch, g0.0, g0.1, c),
        (batch * g0.0 * g0.1, 9 * c),
    );
    let c1 = linear(tape, col, p.lin(&name("cnn.conv1")));
    let c1 = tape.relu(c1);
    let p1 = tape.group_mean(c1, pool2x2_groups(batch, g0.0, g0.1).0);
    let col2 = tape.gather(p1, conv3x3_index(batch, g1.0, g1.1, w), (batch * g1.0 * g1.1, 9 * w));
    let c2 = linear(tape, col2, p.lin(&name("cnn.conv2")));
    let c2 = tape.relu(c2);
    let p2 = tape.group_mean(c2, pool2x2_groups(batch, g1.0, g1.1).0);
    let per = g2.0 * g2.1;
    let f_b = tape.group_mean(p2, (0..batch).map(|b| (b * per..(b + 1) * per).collect()).collect());

    let [fb, fh, fnn] = match heads {
        Heads::Finals => ["fc_b", "fc_h2", "fc_n"],
        Heads::Actors => ["actor_b", "actor_h", "actor_n"],
    };
    let logit_b = linear(tape, f_b, p.lin(&name(fb)));

    let f_h_flat = linear(tape, f_b, p.lin(&name("fc_h1")));
    let f_h_flat = tape.relu(f_h_flat);
    let f_h = tape.reshape(f_h_flat, (batch * cfg.num_heads, cfg.e_dprime));
    let lh = linear(tape, f_h, p.lin(&name(fh)));
    let logit_h = tape.reshape(lh, (batch, cfg.num_heads));

    let t1 = linear(tape, spatial, p.lin(&name("mlp_n.fc1")));
    let t1 = tape.relu(t1);
    let t2 = linear(tape, t1, p.lin(&name("mlp_n.fc2")));
    let f_n = tape.relu(t2);
    let ln = linear(tape, f_n, p.lin(&name(fnn)));
    let logit_n = tape.reshape(ln, (batch, cfg.num_tokens));
    let n = cfg.num_tokens;
    let f_n_mean = tape.group_mean(f_n, (0..batch).map(|b| (b * n..(b + 1) * n).collect()).collect());
    CtrlGraph {
        logit_b,
        logit_h,
        logit_n,
        f_b,
        f_h,
        f_h_flat,
        f_n,
        f_n_mean,
    }
}

/// Effective block, head and token masks of a batch, `(batch,1)`,
/// `(batch,H)`, `(batch,N)`, with their hard values.
#[derive(Debug, Clone)]
pub struct GraphMasks<T> {
    pub b: Var,
    pub h: Var,
    pub n: Var,
    pub hard_b: Array2<T>,
    pub hard_h: Array2<T>,
    pub hard_n: Array2<T>,
    pub soft_b: Option<Array2<f64>>,
    pub soft_h: Option<Array2<f64>>,
    pub soft_n: Option<Array2<f64>>,
}

impl<T: Scalar> GraphMasks<T> {
    /// Per-sample bundles recorded from the hard (and soft) values.
    pub fn bundles(&self, cfg: &ValidConfig) -> Vec<MaskBundle> {
        let on = |v: T| v > T::zero();
        (0..self.hard_b.nrows())
            .map(|s| {
                let g_b = self.soft_b.as_ref().map_or(1.0, |g| g[[s, 0]]);
                if !on(self.hard_b[[s, 0]]) {
                    return MaskBundle::skipped(cfg, g_b);
                }
                MaskBundle {
                    d_block: true,
                    g_block: g_b,
                    d_heads: self.hard_h.row(s).iter().map(|&v| on(v)).collect(),
                    g_heads: Some(self.soft_h.as_ref().map_or(vec![1.0; cfg.num_heads], |g| g.row(s).to_vec())),
                    d_tokens: self.hard_n.row(s).iter().map(|&v| on(v)).collect(),
                    g_tokens: Some(self.soft_n.as_ref().map_or(vec![1.0; cfg.num_tokens], |g| g.row(s).to_vec())),
                }
            })
            .collect()
    }

    pub fn constant(tape: &mut Tape<T>, hard_b: Array2<T>, hard_h: Array2<T>, hard_n: Array2<T>) -> Self {
        Self {
            b: tape.constant(hard_b.clone()),
            h: tape.constant(hard_h.clone()),
            n: tape.constant(hard_n.clone()),
            hard_b,
            hard_h,
            hard_n,
            soft_b: None,
            soft_h: None,
            soft_n: None,
        }
    }

    pub fn from_bundles(tape: &mut Tape<T>, cfg: &ValidConfig, bundles: &[&MaskBundle]) -> Self {
        let f = |b: bool| if b { T::one() } else { T::zero() };
        let batch = bundles.len();
        let hb = Array2::from_shape_fn((batch, 1), |(s, _)| f(bundles[s].d_block));
        let hh = Array2::from_shape_fn((batch, cfg.num_heads), |(s, h)| f(bundles[s].d_heads[h]));
        let hn = Array2::from_shape_fn((batch, cfg.num_tokens), |(s, n)| f(bundles[s].d_tokens[n]));
        Self::constant(tape, hb, hh, hn)
    }
}

fn hard_of<T: Scalar>(arg: &Array2<T>) -> Array2<T> {
    arg.mapv(|v| if v >= T::zero() { T::one() } else { T::zero() })
}

/// Straight-through binary concrete masks. `noise[s]` holds the block noise
/// of sample `s`; `None` is eval mode.
pub fn relaxed_masks<T: Scalar>(
    tape: &mut Tape<T>,
    ctrl: &CtrlGraph,
    tau: f64,
    noise: Option<&[&BlockNoise]>,
    dims: DimensionSet,
) -> GraphMasks<T> {
    let batch = tape.shape(ctrl.logit_b).0;
    let mut relax = |logit: Var, pick: &dyn Fn(&BlockNoise) -> Vec<f64>, enabled: bool| {
        let (rows, cols) = tape.shape(logit);
        let arg = match noise {
            Some(noise) => {
                let g = Array2::from_shape_fn((rows, cols), |(s, j)| T::of(pick(noise[s])[j]));
                let shifted = tape.add_const(logit, &g);
                tape.div_scalar(shifted, T::of(tau))
            }
            None => logit,
        };
        let soft = tape.sigmoid(arg);
        let soft_vals = tape.value(arg).mapv(|v| mia_autograd::sigmoid(v.as_f64()));
        let hard = if enabled { hard_of(tape.value(arg)) } else { Array2::ones((rows, cols)) };
        let st = if enabled {
            tape.straight_through(soft, hard.clone())
        } else {
            tape.constant(hard.clone())
        };
        (st, hard, soft_vals)
    };
    let (b, hard_b, soft_b) = relax(ctrl.logit_b, &|n| vec![n.b], dims.depth);
    let (h, hard_h, soft_h) = relax(ctrl.logit_h, &|n| n.h.clone(), dims.head);
    let (n, hard_n, soft_n) = relax(ctrl.logit_n, &|n| n.n.clone(), dims.token);
    // skipped samples carry all-ones head/token masks
    let (h, hard_h) = skip_fill(tape, h, hard_h, &hard_b, batch);
    let (n, hard_n) = skip_fill(tape, n, hard_n, &hard_b, batch);
    GraphMasks {
        b,
        h,
        n,
        hard_b,
        hard_h,
        hard_n,
        soft_b: Some(soft_b),
        soft_h: Some(soft_h),
        soft_n: Some(soft_n),
    }
}

fn skip_fill<T: Scalar>(tape: &mut Tape<T>, m: Var, hard: Array2<T>, hard_b: &Array2<T>, batch: usize) -> (Var, Array2<T>) {
    if hard_b.iter().all(|&v| v > T::zero()) {
        return (m, hard);
    }
    let keep = tape.constant(hard_b.clone());
    let kept = tape.mul_broadcast(m, keep);
    let fill = Array2::from_shape_fn(hard.dim(), |(s, _)| T::one() - hard_b[[s, 0]]);
    let out = tape.add_const(kept, &fill);
    let mut hard = hard;
    for s in 0..batch {
        if hard_b[[s, 0]] == T::zero() {
            hard.row_mut(s).fill(T::one());
        }
    }
    (out, hard)
}

/// Stage-3 actions sampled from the actor logits: keep iff `logit + g >= 0`
/// (eval: `logit >= 0`). Masks are constants; the policy gradient flows
/// through the log-probabilities instead.
pub fn sampled_masks<T: Scalar>(
    tape: &mut Tape<T>,
    ctrl: &CtrlGraph,
    noise: Option<&[&BlockNoise]>,
    dims: DimensionSet,
) -> GraphMasks<T> {
    let batch = tape.shape(ctrl.logit_b).0;
    let act = |tape: &Tape<T>, logit: Var, pick: &dyn Fn(&BlockNoise) -> Vec<f64>, enabled: bool| {
        let v = tape.value(logit);
        if !enabled {
            return Array2::ones(v.dim());
        }
        Array2::from_shape_fn(v.dim(), |(s, j)| {
            let g = noise.map(|n| pick(n[s])[j]);
            if super::relaxed_arg(v[[s, j]], 1.0, g) >= T::zero() {
                T::one()
            } else {
                T::zero()
            }
        })
    };
    let hard_b = act(tape, ctrl.logit_b, &|n| vec![n.b], dims.depth);
    let mut hard_h = act(tape, ctrl.logit_h, &|n| n.h.clone(), dims.head);
    let mut hard_n = act(tape, ctrl.logit_n, &|n| n.n.clone(), dims.token);
    for s in 0..batch {
        if hard_b[[s, 0]] == T::zero() {
            hard_h.row_mut(s).fill(T::one());
            hard_n.row_mut(s).fill(T::one());
        }
    }
    GraphMasks::constant(tape, hard_b, hard_h, hard_n)
}

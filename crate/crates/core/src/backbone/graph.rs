//! Dense-masked backbone on the autodiff tape.
//!
//! Token rows are stacked sample-major: row `b*T + t` is token `t` of sample
//! `b`, with the class token (if any) at `t = 0`. Masks multiply every
//! contribution, so a block with hard 0/1 masks produces the same values as
//! the compacted inference route while mask gradients pass straight through.

use mia_autograd::{Scalar, Tape, Var};

use crate::config::ValidConfig;
use crate::geometry::patchify_index;
use crate::numerics::LN_EPS;
use crate::params::{block_name, Bound};

/// Row indices of the spatial tokens in a stacked `(batch*T, C)` matrix.
pub fn spatial_rows(cfg: &ValidConfig, batch: usize) -> Vec<usize> {
    (0..batch)
        .flat_map(|b| (0..cfg.num_tokens).map(move |n| b * cfg.seq_len + cfg.token_row(n)))
        .collect()
}

/// Sample index of every stacked token row.
pub fn row_samples(cfg: &ValidConfig, batch: usize) -> Vec<usize> {
    (0..batch).flat_map(|b| std::iter::repeat_n(b, cfg.seq_len)).collect()
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, (w, b): (Var, Var)) -> Var {
    let y = tape.matmul(x, w);
    tape.add_broadcast(y, b)
}

/// `(batch, image_len)` pixels to stacked token rows.
pub fn embed<T: Scalar>(tape: &mut Tape<T>, p: &Bound, cfg: &ValidConfig, images: Var, batch: usize) -> Var {
    let patches = tape.gather(images, patchify_index(cfg, batch), (batch * cfg.num_tokens, cfg.patch_dim));
    let proj = linear(tape, patches, p.lin("embed.patch"));
    let pos_rows: Vec<usize> = (0..batch).flat_map(|_| 0..cfg.num_tokens).collect();
    let pos = tape.gather_rows(p.get("embed.pos"), &pos_rows);
    let spatial = tape.add(proj, pos);
    if !cfg.use_class_token {
        return spatial;
    }
    let cls = tape.add(p.get("embed.cls"), p.get("embed.cls_pos"));
    let both = tape.concat_rows(&[cls, spatial]);
    let order: Vec<usize> = (0..batch)
        .flat_map(|b| std::iter::once(0).chain((0..cfg.num_tokens).map(move |n| 1 + b * cfg.num_tokens + n)))
        .collect();
    tape.gather_rows(both, &order)
}

/// Per-row masks of one block, all on stacked token rows.
#[derive(Debug, Clone, Copy)]
pub struct BlockMasks {
    /// Token keep times block keep, `(batch*T, 1)`.
    pub gate: Var,
    /// Token keep for the attention keys, `(batch*T, 1)`.
    pub keys: Var,
    /// Head mask expanded over channel groups, `(batch*T, H*E)`.
    pub chan: Var,
    /// Head mask expanded over MLP hidden groups, `(batch*T, hidden)`.
    pub hidden: Var,
}

impl BlockMasks {
    /// Builds row masks from per-sample block `(batch,1)`, head `(batch,H)`
    /// and token `(batch,N)` masks.
    pub fn from_sample_masks<T: Scalar>(
        tape: &mut Tape<T>,
        cfg: &ValidConfig,
        batch: usize,
        b: Var,
        h: Var,
        n: Var,
    ) -> Self {
        let owner = row_samples(cfg, batch);
        let flat = tape.reshape(n, (batch * cfg.num_tokens, 1));
        let tokens = if cfg.use_class_token {
            let one = tape.constant(ndarray::Array2::ones((1, 1)));
            let both = tape.concat_rows(&[one, flat]);
            let order: Vec<usize> = (0..batch)
                .flat_map(|s| std::iter::once(0).chain((0..cfg.num_tokens).map(move |i| 1 + s * cfg.num_tokens + i)))
                .collect();
            tape.gather_rows(both, &order)
        } else {
            flat
        };
        let b_rows = tape.gather_rows(b, &owner);
        let gate = tape.mul(tokens, b_rows);
        let h_rows = tape.gather_rows(h, &owner);
        let chan = tape.expand_cols(h_rows, cfg.head_dim);
        let hidden = tape.expand_cols(h_rows, cfg.mlp_group);
        Self {
            gate,
            keys: tokens,
            chan,
            hidden,
        }
    }
}

/// One block; `masks = None` is the plain dense block.
pub fn block<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ValidConfig,
    l: usize,
    x: Var,
    batch: usize,
    masks: Option<&BlockMasks>,
) -> Var {
    let name = |s: &str| block_name(l, s);
    let eps = T::of(LN_EPS);
    let chan = |tape: &mut Tape<T>, v: Var| match masks {
        Some(m) => tape.mul(v, m.chan),
        None => v,
    };
    let gated = |tape: &mut Tape<T>, v: Var| match masks {
        Some(m) => {
            let c = tape.mul(v, m.chan);
            tape.mul_broadcast(c, m.gate)
        }
        None => v,
    };
    let xn = tape.layer_norm(x, p.get(&name("norm1.gamma")), p.get(&name("norm1.beta")), eps);
    let xin = chan(tape, xn);
    let q = linear(tape, xin, p.lin(&name("attn.q")));
    let k = linear(tape, xin, p.lin(&name("attn.k")));
    let v = linear(tape, xin, p.lin(&name("attn.v")));
    let a = tape.attention(q, k, v, masks.map(|m| m.keys), batch, cfg.num_heads);
    let a = chan(tape, a);
    let a = linear(tape, a, p.lin(&name("attn.proj")));
    let a = gated(tape, a);
    let x1 = tape.add(x, a);
    let xn2 = tape.layer_norm(x1, p.get(&name("norm2.gamma")), p.get(&name("norm2.beta")), eps);
    let xin2 = chan(tape, xn2);
    let h1 = linear(tape, xin2, p.lin(&name("mlp.fc1")));
    let h1 = tape.gelu(h1);
    let h1 = match masks {
        Some(m) => tape.mul(h1, m.hidden),
        None => h1,
    };
    let m = linear(tape, h1, p.lin(&name("mlp.fc2")));
    let m = gated(tape, m);
    tape.add(x1, m)
}

pub fn classify<T: Scalar>(tape: &mut Tape<T>, p: &Bound, cfg: &ValidConfig, x: Var, batch: usize) -> Var {
    let pooled = if cfg.use_class_token {
        let rows: Vec<usize> = (0..batch).map(|b| b * cfg.seq_len).collect();
        tape.gather_rows(x, &rows)
    } else {
        let groups = (0..batch)
            .map(|b| (0..cfg.seq_len).map(|t| b * cfg.seq_len + t).collect())
            .collect();
        tape.group_mean(x, groups)
    };
    let normed = tape.layer_norm(pooled, p.get("norm.gamma"), p.get("norm.beta"), T::of(LN_EPS));
    linear(tape, normed, p.lin("head"))
}

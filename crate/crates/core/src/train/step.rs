//! Data-parallel gradient evaluation over fixed-size micro-batches.
//!
//! A batch is cut into chunks of `micro_batch` samples. Each chunk gets its
//! own tape; all chunks are run forward first so batch-level statistics can
//! set the loss weights, then backward, and the per-chunk gradients are
//! summed in chunk order. Results therefore do not depend on thread count.

use mia_autograd::{Tape, Var};
use ndarray::Array2;

use crate::error::Result;
use crate::parallel;
use crate::params::{Bound, ParamStore};

/// One chunk's tape with its bound parameters and forward outputs.
pub struct Pass<S> {
    pub tape: Tape<f32>,
    pub bound: Bound,
    pub out: S,
}

pub fn split_chunks(batch: &[usize], micro: usize) -> Vec<Vec<usize>> {
    batch.chunks(micro.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn forward_chunks<S, F>(
    params: &ParamStore<f32>,
    trainable: &(dyn Fn(&str) -> bool + Sync),
    chunks: &[Vec<usize>],
    f: F,
) -> Result<Vec<Pass<S>>>
where
    S: Send,
    F: Fn(&mut Tape<f32>, &Bound, &[usize]) -> Result<S> + Sync,
{
    parallel::map(chunks, |_, idx| {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, params, trainable);
        let out = f(&mut tape, &bound, idx)?;
        Ok(Pass { tape, bound, out })
    })
    .into_iter()
    .collect()
}

/// Sum over chunks of the gradients of the seeded outputs.
pub fn backward_chunks<S, F>(passes: &[Pass<S>], seeds: F) -> ParamStore<f32>
where
    S: Sync,
    F: Fn(&S) -> Vec<(Var, Array2<f32>)> + Sync,
{
    let per = parallel::map(passes, |_, pass| {
        let mut grads = pass.tape.backward_seeded(&seeds(&pass.out));
        pass.bound.collect(&pass.tape, &mut grads)
    });
    let mut iter = per.into_iter();
    let mut total = iter.next().unwrap_or_default();
    for g in iter {
        for (name, v) in g.iter() {
            *total.get_mut(name) += v;
        }
    }
    total
}

/// Column of `value` repeated `rows` times, for seeding per-sample outputs.
pub fn fill(rows: usize, value: f64) -> Array2<f32> {
    Array2::from_elem((rows, 1), value as f32)
}

//! Plain (non-differentiable) kernels for the inference route, with an
//! instrumented matrix multiply that tallies FLOPs as `2 * m * k * p`.

use std::cell::Cell;

use mia_autograd::{gelu, Scalar};
use ndarray::{Array2, ArrayView2, Axis};

pub const LN_EPS: f64 = 1e-6;

/// Counts multiply-accumulate work of every [`matmul`] it is passed to.
#[derive(Debug, Default)]
pub struct FlopCounter {
    flops: Cell<u64>,
    calls: Cell<u64>,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    pub fn calls(&self) -> u64 {
        self.calls.get()
    }

    pub fn add(&self, flops: u64) {
        self.flops.set(self.flops.get() + flops);
        self.calls.set(self.calls.get() + 1);
    }
}

pub fn matmul<T: Scalar>(a: &ArrayView2<'_, T>, b: &ArrayView2<'_, T>, counter: &FlopCounter) -> Array2<T> {
    assert_eq!(a.ncols(), b.nrows());
    counter.add(2 * (a.nrows() * a.ncols() * b.ncols()) as u64);
    a.dot(b)
}

/// `x @ w + bias` with a `(1, out)` bias row.
pub fn linear<T: Scalar>(
    x: &ArrayView2<'_, T>,
    w: &ArrayView2<'_, T>,
    bias: &ArrayView2<'_, T>,
    counter: &FlopCounter,
) -> Array2<T> {
    let mut y = matmul(x, w, counter);
    y += bias;
    y
}

pub fn layer_norm<T: Scalar>(x: &ArrayView2<'_, T>, gamma: &ArrayView2<'_, T>, beta: &ArrayView2<'_, T>) -> Array2<T> {
    let c = T::of(x.ncols() as f64);
    let eps = T::of(LN_EPS);
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let mean = row.sum() / c;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / c;
        let rs = T::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * rs);
    }
    out *= gamma;
    out += beta;
    out
}

pub fn relu_inplace<T: Scalar>(x: &mut Array2<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

pub fn gelu_inplace<T: Scalar>(x: &mut Array2<T>) {
    x.mapv_inplace(gelu);
}

pub fn softmax_rows_inplace<T: Scalar>(x: &mut Array2<T>) {
    for mut row in x.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

pub fn mean_rows<T: Scalar>(x: &ArrayView2<'_, T>) -> Array2<T> {
    assert!(x.nrows() > 0, "mean of zero rows");
    x.sum_axis(Axis(0)).insert_axis(Axis(0)) / T::of(x.nrows() as f64)
}

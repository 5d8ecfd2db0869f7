//! Finite-difference helpers for gradient checks.

use ndarray::Array2;

/// Central-difference gradient of `f` at `x`.
pub fn central_diff<F>(f: F, x: &Array2<f64>, h: f64) -> Array2<f64>
where
    F: Fn(&Array2<f64>) -> f64,
{
    let mut grad = Array2::zeros(x.dim());
    let mut probe = x.clone();
    for (idx, g) in grad.indexed_iter_mut() {
        let orig = probe[idx];
        probe[idx] = orig + h;
        let up = f(&probe);
        probe[idx] = orig - h;
        let down = f(&probe);
        probe[idx] = orig;
        *g = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest elementwise relative error, with `floor` guarding near-zero entries.
pub fn max_rel_error(a: &Array2<f64>, b: &Array2<f64>, floor: f64) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

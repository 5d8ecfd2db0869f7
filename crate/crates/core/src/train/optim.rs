//! Adam with decoupled weight decay, and global-norm clipping.

use mia_autograd::Scalar;
use ndarray::Zip;

use crate::params::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Moment estimates for every tensor it has seen; plain Adam when the decay
/// is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub weight_decay: f64,
    pub step: u64,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

/// Only matrices named `*.weight` are decayed.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            weight_decay,
            step: 0,
            m: ParamStore::new(),
            v: ParamStore::new(),
        }
    }

    /// One update of every tensor in `grads`; `lr` picks the rate by name.
    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &ParamStore<f32>, lr: &dyn Fn(&str) -> f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (name, g) in grads.iter() {
            let rate = lr(name);
            if rate == 0.0 {
                continue;
            }
            if !self.m.contains(name) {
                self.m.insert(name.clone(), g.mapv(|_| 0.0));
                self.v.insert(name.clone(), g.mapv(|_| 0.0));
            }
            let decay = if decays(name) { 1.0 - rate * self.weight_decay } else { 1.0 };
            let m = self.m.get_mut(name);
            Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = (BETA1 * *m as f64 + (1.0 - BETA1) * g as f64) as f32;
            });
            let v = self.v.get_mut(name);
            Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = (BETA2 * *v as f64 + (1.0 - BETA2) * (g as f64) * (g as f64)) as f32;
            });
            let (m, v) = (self.m.get(name), self.v.get(name));
            Zip::from(params.get_mut(name)).and(m).and(v).for_each(|p, &m, &v| {
                let mh = m as f64 / c1;
                let vh = v as f64 / c2;
                *p = (*p as f64 * decay - rate * mh / (vh.sqrt() + EPS)) as f32;
            });
        }
    }
}

pub fn global_norm<T: Scalar>(grads: &ParamStore<T>) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .fold(0.0, |acc, v| acc + v.as_f64() * v.as_f64())
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.insert("a.bias", arr2(&[[1.0f32, -2.0]]));
        let mut g = ParamStore::new();
        g.insert("a.bias", arr2(&[[0.5f32, -3.0]]));
        let mut opt = AdamW::new(0.1);
        opt.update(&mut p, &g, &|_| 0.01);
        // bias-corrected first step is lr * sign(g)
        let got = p.get("a.bias");
        assert!((got[[0, 0]] - 0.99).abs() < 1e-6);
        assert!((got[[0, 1]] + 1.99).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_only_on_weights() {
        let mut p = ParamStore::new();
        p.insert("a.weight", Array2::from_elem((1, 1), 2.0f32));
        p.insert("a.bias", Array2::from_elem((1, 1), 2.0f32));
        let mut g = p.zeros_like();
        g.get_mut("a.weight").fill(0.0);
        let mut opt = AdamW::new(0.5);
        opt.update(&mut p, &g, &|_| 0.1);
        assert!((p.get("a.weight")[[0, 0]] - 1.9).abs() < 1e-6);
        assert_eq!(p.get("a.bias")[[0, 0]], 2.0);
    }

    #[test]
    fn matches_scalar_reference_over_steps() {
        let mut p = ParamStore::new();
        p.insert("w", Array2::from_elem((1, 1), 1.0f32));
        let mut opt = AdamW::new(0.0);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=20 {
            let grad = 2.0 * x - 0.3;
            let mut g = ParamStore::new();
            g.insert("w", Array2::from_elem((1, 1), (2.0 * p.get("w")[[0, 0]] as f64 - 0.3) as f32));
            opt.update(&mut p, &g, &|_| 0.05);
            m = 0.9 * m + 0.1 * grad;
            v = 0.999 * v + 0.001 * grad * grad;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.05 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p.get("w")[[0, 0]] as f64 - x).abs() < 1e-5);
    }

    #[test]
    fn clipping() {
        let mut g = ParamStore::new();
        g.insert("a", arr2(&[[3.0f64, 4.0]]));
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        assert_eq!(clip_global_norm(&mut g, 10.0), 1.0);
    }
}

//! Adversarial evaluation: PGD under an L∞ ball and a single normalized
//! gradient step under an L2 ball, both against the dynamic model.
//!
//! Input gradients use the tape route in eval mode with straight-through
//! masks, recomputed from the perturbed input at every step.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use mia_autograd::{Scalar, Tape};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ValidConfig;
use crate::controller::{has_rl_heads, DimensionSet, Heads};
use crate::data::Dataset;
use crate::error::{MiaError, Result};
use crate::model::{forward_graph, model_forward, GraphPolicy, Policy};
use crate::parallel;
use crate::params::{Bound, ParamStore};

const GRAD_CHUNK: usize = 16;
const EVAL_BATCH: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    PgdLinf,
    FgsmL2,
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::PgdLinf => "pgd_linf",
            AttackKind::FgsmL2 => "fgsm_l2",
        })
    }
}

impl FromStr for AttackKind {
    type Err = MiaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pgd" | "pgd_linf" => Ok(AttackKind::PgdLinf),
            "fgsm" | "fgsm_l2" => Ok(AttackKind::FgsmL2),
            other => Err(MiaError::Invalid(format!("unknown attack {other:?} (expected pgd or fgsm)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Radius on `[0, 1]` pixels.
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
    pub random_start: bool,
}

impl AttackSpec {
    pub fn pgd() -> Self {
        Self {
            kind: AttackKind::PgdLinf,
            epsilon: 0.002,
            steps: 10,
            step_size: 0.002 / 4.0,
            seed: 0,
            random_start: false,
        }
    }

    pub fn fgsm() -> Self {
        Self {
            kind: AttackKind::FgsmL2,
            epsilon: 0.03,
            steps: 1,
            step_size: 0.03,
            seed: 0,
            random_start: false,
        }
    }

    pub fn default_for(kind: AttackKind) -> Self {
        match kind {
            AttackKind::PgdLinf => Self::pgd(),
            AttackKind::FgsmL2 => Self::fgsm(),
        }
    }

    /// A zero radius is accepted and leaves inputs untouched.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(MiaError::Invalid(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(MiaError::Invalid("attack steps must be >= 1".into()));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(MiaError::Invalid(format!("step size must be finite and >= 0, got {}", self.step_size)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AttackOutput {
    pub images: Array2<f32>,
    /// Per-sample perturbation norm before pixel clipping (L2 attacks only).
    pub pre_clip_norms: Option<Vec<f64>>,
    /// Rows whose input gradient was exactly zero.
    pub zero_gradient: Vec<usize>,
}

fn model_heads<T: Scalar>(params: &ParamStore<T>) -> Heads {
    if has_rl_heads(params) {
        Heads::Actors
    } else {
        Heads::Finals
    }
}

/// Per-sample cross-entropy and its gradient with respect to the pixels.
pub fn input_gradient<T: Scalar>(
    cfg: &ValidConfig,
    params: &ParamStore<T>,
    images: &Array2<T>,
    labels: &[usize],
    dims: DimensionSet,
) -> Result<(Array2<T>, Vec<f64>)> {
    if images.nrows() != labels.len() {
        return Err(MiaError::shape("attack labels", images.nrows(), labels.len()));
    }
    if images.ncols() != cfg.image_len {
        return Err(MiaError::shape("image row", cfg.image_len, images.ncols()));
    }
    let heads = model_heads(params);
    let rows: Vec<usize> = (0..images.nrows()).collect();
    let chunks: Vec<&[usize]> = rows.chunks(GRAD_CHUNK).collect();
    let parts = parallel::map(&chunks, |_, idx| {
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, params, &|_| false);
        let x = tape.param(images.select(Axis(0), idx));
        let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let policy = GraphPolicy::Relaxed {
            tau: 1.0,
            noise: None,
            dims,
            heads,
        };
        let out = forward_graph(&mut tape, &p, cfg, x, idx.len(), policy);
        let ce = tape.cross_entropy(out.logits, &ys);
        let losses: Vec<f64> = tape.value(ce).iter().map(|v| v.as_f64()).collect();
        let mut g = tape.backward_seeded(&[(ce, Array2::ones((idx.len(), 1)))]);
        let grad = g.take(x).unwrap_or_else(|| Array2::zeros((idx.len(), cfg.image_len)));
        (grad, losses)
    });
    let mut grad = Array2::zeros(images.dim());
    let mut losses = Vec::with_capacity(images.nrows());
    for (idx, (g, l)) in chunks.iter().zip(parts) {
        for (k, &i) in idx.iter().enumerate() {
            grad.row_mut(i).assign(&g.row(k));
        }
        losses.extend(l);
    }
    Ok((grad, losses))
}

/// Moves `v` one representable step toward `target`.
fn toward(v: f32, target: f32) -> f32 {
    if v == target {
        v
    } else if v > target {
        f32::from_bits(if v > 0.0 { v.to_bits() - 1 } else { v.to_bits() + 1 })
    } else {
        f32::from_bits(if v >= 0.0 { v.to_bits() + 1 } else { v.to_bits() - 1 })
    }
}

/// `v` projected onto `[x - eps, x + eps] ∩ [0, 1]`, exact after rounding.
fn project_linf(v: f64, x: f32, eps: f64) -> f32 {
    let x64 = f64::from(x);
    let lo = (x64 - eps).max(0.0);
    let hi = (x64 + eps).min(1.0);
    let mut out = v.clamp(lo, hi) as f32;
    while (f64::from(out) - x64).abs() > eps {
        out = toward(out, x);
    }
    out.clamp(0.0, 1.0)
}

fn check_pixels(images: &Array2<f32>) -> Result<()> {
    if images.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(MiaError::Invalid("attack inputs must lie in [0, 1]".into()));
    }
    Ok(())
}

pub fn pgd_attack(
    cfg: &ValidConfig,
    params: &ParamStore<f32>,
    images: &Array2<f32>,
    labels: &[usize],
    spec: &AttackSpec,
    dims: DimensionSet,
) -> Result<AttackOutput> {
    spec.validate()?;
    check_pixels(images)?;
    let eps = spec.epsilon;
    let mut x = images.clone();
    if spec.random_start && eps > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for (v, &x0) in x.iter_mut().zip(images.iter()) {
            *v = project_linf(f64::from(x0) + rng.random_range(-eps..=eps), x0, eps);
        }
    }
    let mut zero = Vec::new();
    for step in 0..spec.steps {
        let (g, _) = input_gradient(cfg, params, &x, labels, dims)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(MiaError::NonFiniteGradient { step });
        }
        if step == 0 {
            zero = zero_rows(&g);
        }
        for ((v, &x0), &gv) in x.iter_mut().zip(images.iter()).zip(g.iter()) {
            let dir = if gv > 0.0 {
                1.0
            } else if gv < 0.0 {
                -1.0
            } else {
                0.0
            };
            *v = project_linf(f64::from(*v) + spec.step_size * dir, x0, eps);
        }
    }
    Ok(AttackOutput {
        images: x,
        pre_clip_norms: None,
        zero_gradient: zero,
    })
}

fn zero_rows(g: &Array2<f32>) -> Vec<usize> {
    g.outer_iter()
        .enumerate()
        .filter(|(_, r)| r.iter().all(|&v| v == 0.0))
        .map(|(i, _)| i)
        .collect()
}

fn l2(a: impl Iterator<Item = f64>) -> f64 {
    a.map(|v| v * v).sum::<f64>().sqrt()
}

pub fn fgsm_l2_attack(
    cfg: &ValidConfig,
    params: &ParamStore<f32>,
    images: &Array2<f32>,
    labels: &[usize],
    spec: &AttackSpec,
    dims: DimensionSet,
) -> Result<AttackOutput> {
    spec.validate()?;
    check_pixels(images)?;
    let eps = spec.epsilon;
    let (g, _) = input_gradient(cfg, params, images, labels, dims)?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(MiaError::NonFiniteGradient { step: 0 });
    }
    let mut out = images.clone();
    let mut norms = Vec::with_capacity(images.nrows());
    let zero = zero_rows(&g);
    for (i, (mut row, grow)) in out.outer_iter_mut().zip(g.outer_iter()).enumerate() {
        let gn = l2(grow.iter().map(|&v| f64::from(v)));
        if gn == 0.0 || eps == 0.0 {
            norms.push(0.0);
            continue;
        }
        let delta: Vec<f64> = grow.iter().map(|&v| eps * f64::from(v) / gn).collect();
        norms.push(l2(delta.iter().copied()));
        let x0 = images.row(i);
        for ((v, &x), d) in row.iter_mut().zip(x0.iter()).zip(&delta) {
            *v = (f64::from(x) + d).clamp(0.0, 1.0) as f32;
        }
        // rounding to f32 may push the norm a hair past the radius
        while l2(row.iter().zip(x0.iter()).map(|(&a, &b)| f64::from(a) - f64::from(b))) > eps {
            for (v, &x) in row.iter_mut().zip(x0.iter()) {
                *v = toward(*v, x);
            }
        }
    }
    Ok(AttackOutput {
        images: out,
        pre_clip_norms: Some(norms),
        zero_gradient: zero,
    })
}

pub fn run_attack(
    cfg: &ValidConfig,
    params: &ParamStore<f32>,
    images: &Array2<f32>,
    labels: &[usize],
    spec: &AttackSpec,
    dims: DimensionSet,
) -> Result<AttackOutput> {
    match spec.kind {
        AttackKind::PgdLinf => pgd_attack(cfg, params, images, labels, spec, dims),
        AttackKind::FgsmL2 => fgsm_l2_attack(cfg, params, images, labels, spec, dims),
    }
}

/// One line of the robustness CSV. The clean-only row uses attack `none`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub checkpoint: String,
    pub attack: String,
    pub epsilon: f64,
    pub steps: usize,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub exec_ratio_clean: f64,
    pub exec_ratio_adv: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustReport {
    pub samples: usize,
    pub rows: Vec<ReportRow>,
    /// Attacked samples whose gradient vanished, per attack row.
    pub zero_gradient: Vec<usize>,
}

impl RobustReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| MiaError::Data(format!("{}: {e}", path.display())))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| MiaError::Data(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| MiaError::io(path, e))
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{} samples\n", self.samples);
        for r in &self.rows {
            s.push_str(&format!(
                "{:<9} eps {:<7} clean {:.4} robust {:.4} exec clean {:.4} adv {:.4}\n",
                r.attack, r.epsilon, r.clean_acc, r.robust_acc, r.exec_ratio_clean, r.exec_ratio_adv
            ));
        }
        s
    }
}

/// Accuracy and mean exec ratio of the eval policy on `images`.
fn score(cfg: &ValidConfig, params: &ParamStore<f32>, images: &Array2<f32>, labels: &[usize], ids: &[u64], dims: DimensionSet) -> Result<(usize, f64)> {
    let out = model_forward(cfg, params, images, ids, Some(labels), Policy::eval(params, dims))?;
    let correct = out.traces.iter().filter(|t| t.correct() == Some(true)).count();
    let ratio: f64 = out.flops.samples.iter().map(|s| s.ratio).sum();
    Ok((correct, ratio))
}

/// Clean metrics plus one row per attack.
pub fn evaluate(
    cfg: &ValidConfig,
    params: &ParamStore<f32>,
    data: &Dataset,
    attacks: &[AttackSpec],
    checkpoint: &str,
    dims: DimensionSet,
) -> Result<RobustReport> {
    if data.is_empty() {
        return Err(MiaError::Data("robustness evaluation on an empty dataset".into()));
    }
    let n = data.len();
    let idx: Vec<usize> = (0..n).collect();
    let (mut clean_ok, mut clean_exec) = (0usize, 0.0f64);
    let mut adv_ok = vec![0usize; attacks.len()];
    let mut adv_exec = vec![0.0f64; attacks.len()];
    let mut zero = vec![0usize; attacks.len()];
    for part in idx.chunks(EVAL_BATCH) {
        let (images, labels, ids) = data.batch(part);
        let (c, e) = score(cfg, params, &images, &labels, &ids, dims)?;
        clean_ok += c;
        clean_exec += e;
        for (k, spec) in attacks.iter().enumerate() {
            let adv = run_attack(cfg, params, &images, &labels, spec, dims)?;
            let (c, e) = score(cfg, params, &adv.images, &labels, &ids, dims)?;
            adv_ok[k] += c;
            adv_exec[k] += e;
            zero[k] += adv.zero_gradient.len();
        }
    }
    let nf = n as f64;
    let clean_acc = clean_ok as f64 / nf;
    let exec_clean = clean_exec / nf;
    let mut rows = Vec::new();
    if attacks.is_empty() {
        rows.push(ReportRow {
            checkpoint: checkpoint.to_string(),
            attack: "none".into(),
            epsilon: 0.0,
            steps: 0,
            clean_acc,
            robust_acc: clean_acc,
            exec_ratio_clean: exec_clean,
            exec_ratio_adv: exec_clean,
        });
    }
    for (k, spec) in attacks.iter().enumerate() {
        rows.push(ReportRow {
            checkpoint: checkpoint.to_string(),
            attack: spec.kind.to_string(),
            epsilon: spec.epsilon,
            steps: spec.steps,
            clean_acc,
            robust_acc: adv_ok[k] as f64 / nf,
            exec_ratio_clean: exec_clean,
            exec_ratio_adv: adv_exec[k] / nf,
        });
    }
    Ok(RobustReport {
        samples: n,
        rows,
        zero_gradient: zero,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::MiaConfig;
    use crate::params::init_model;

    fn setup() -> (ValidConfig, ParamStore<f32>, Array2<f32>, Vec<usize>) {
        let cfg = MiaConfig::tiny_vit().validate().unwrap();
        let mut store: ParamStore<f32> = init_model(&cfg, 5);
        for (name, t) in store.iter_mut() {
            if !name.starts_with("ctrl.") {
                t.mapv_inplace(|v| v * 4.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut images = Array2::from_shape_fn((6, cfg.image_len), |_| rng.random::<f32>());
        images[[0, 0]] = 0.0;
        images[[0, 1]] = 1.0;
        (cfg, store, images, vec![0, 1, 2, 3, 4, 5])
    }

    #[test]
    fn zero_radius_is_identity() {
        let (cfg, store, images, labels) = setup();
        let mut spec = AttackSpec::pgd();
        spec.epsilon = 0.0;
        let out = pgd_attack(&cfg, &store, &images, &labels, &spec, DimensionSet::ALL).unwrap();
        assert_eq!(out.images, images);
        spec.kind = AttackKind::FgsmL2;
        let out = fgsm_l2_attack(&cfg, &store, &images, &labels, &spec, DimensionSet::ALL).unwrap();
        assert_eq!(out.images, images);
    }

    #[test]
    fn pgd_stays_in_ball_and_range() {
        let (cfg, store, images, labels) = setup();
        let spec = AttackSpec::pgd();
        let out = pgd_attack(&cfg, &store, &images, &labels, &spec, DimensionSet::ALL).unwrap();
        let mut moved = 0.0f64;
        for (&a, &x) in out.images.iter().zip(images.iter()) {
            let d = (f64::from(a) - f64::from(x)).abs();
            assert!(d <= 0.002, "{d}");
            assert!((0.0..=1.0).contains(&a));
            moved = moved.max(d);
        }
        assert!(moved > 0.0019);
    }

    #[test]
    fn fgsm_norms_exact() {
        let (cfg, store, images, labels) = setup();
        let spec = AttackSpec::fgsm();
        let out = fgsm_l2_attack(&cfg, &store, &images, &labels, &spec, DimensionSet::ALL).unwrap();
        for (i, &pre) in out.pre_clip_norms.as_ref().unwrap().iter().enumerate() {
            assert!((pre - 0.03).abs() < 1e-12, "{pre}");
            let post = l2(out.images.row(i).iter().zip(images.row(i).iter()).map(|(&a, &b)| f64::from(a) - f64::from(b)));
            assert!(post <= 0.03);
            assert!(post > 0.029);
        }
    }

    #[test]
    fn fgsm_raises_loss() {
        let (cfg, store, images, labels) = setup();
        let out = fgsm_l2_attack(&cfg, &store, &images, &labels, &AttackSpec::fgsm(), DimensionSet::ALL).unwrap();
        let (_, before) = input_gradient(&cfg, &store, &images, &labels, DimensionSet::ALL).unwrap();
        let (_, after) = input_gradient(&cfg, &store, &out.images, &labels, DimensionSet::ALL).unwrap();
        let up = before.iter().zip(&after).filter(|(b, a)| a >= b).count();
        assert!(up * 10 >= 9 * labels.len(), "{before:?} {after:?}");
    }

    #[test]
    fn projection_is_exact_near_bounds() {
        for &x in &[0.0f32, 1.0, 0.3, 0.001, 0.999, 1.0 / 3.0] {
            for &v in &[-1.0, 2.0, f64::from(x) + 0.002, f64::from(x) - 0.002, f64::from(x) + 0.0021] {
                let p = project_linf(v, x, 0.002);
                assert!((f64::from(p) - f64::from(x)).abs() <= 0.002);
                assert!((0.0..=1.0).contains(&p));
            }
        }
    }

    #[test]
    fn attack_kind_parsing() {
        assert_eq!("pgd".parse::<AttackKind>().unwrap(), AttackKind::PgdLinf);
        assert_eq!("fgsm_l2".parse::<AttackKind>().unwrap(), AttackKind::FgsmL2);
        assert!("cw".parse::<AttackKind>().is_err());
        assert!(AttackSpec { steps: 0, ..AttackSpec::pgd() }.validate().is_err());
    }
}

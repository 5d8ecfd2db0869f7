//! Named parameter tensors and their initialization.
//!
//! Every tensor is a 2-D array keyed by a canonical dotted path such as
//! `blocks.2.attn.q.weight` or `ctrl.0.fc_h1.bias`. Linear weights are stored
//! `(in, out)`; per-head channel groups are contiguous column (or row) ranges.

use std::collections::{BTreeMap, HashMap};

use mia_autograd::{Grads, Scalar, Tape, Var};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ValidConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Array2<T>>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn remove(&mut self, name: &str) -> Option<Array2<T>> {
        self.tensors.remove(name)
    }

    pub fn get(&self, name: &str) -> &Array2<T> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Array2<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<T> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| U::of(x.as_f64()))))
                .collect(),
        }
    }

    /// Zero-valued store with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Array2::zeros(v.dim())))
                .collect(),
        }
    }

    pub fn mapped(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.mapv(&f))).collect(),
        }
    }

    /// The tensors whose names satisfy `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// A store placed on a tape: trainable tensors become parameters, the rest
/// constants.
pub struct Bound {
    vars: HashMap<String, Var>,
    trainable: Vec<String>,
}

impl Bound {
    pub fn new<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, trainable: &dyn Fn(&str) -> bool) -> Self {
        let mut vars = HashMap::with_capacity(store.len());
        let mut names = Vec::new();
        for (name, value) in store.iter() {
            let v = if trainable(name) {
                names.push(name.clone());
                tape.param(value.clone())
            } else {
                tape.constant(value.clone())
            };
            vars.insert(name.clone(), v);
        }
        Self {
            vars,
            trainable: names,
        }
    }

    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// `(weight, bias)` of a linear layer.
    pub fn lin(&self, prefix: &str) -> (Var, Var) {
        (
            self.get(&format!("{prefix}.weight")),
            self.get(&format!("{prefix}.bias")),
        )
    }

    pub fn trainable(&self) -> &[String] {
        &self.trainable
    }

    /// Gradients of the trainable tensors (zeros when unreached).
    pub fn collect<T: Scalar>(&self, tape: &Tape<T>, grads: &mut Grads<T>) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for name in &self.trainable {
            let v = self.get(name);
            let g = grads
                .take(v)
                .unwrap_or_else(|| Array2::zeros(tape.shape(v)));
            out.insert(name.clone(), g);
        }
        out
    }
}

pub fn is_controller(name: &str) -> bool {
    name.starts_with("ctrl.")
}

pub fn is_rl_head(name: &str) -> bool {
    is_controller(name) && (name.contains(".actor_") || name.contains(".critic_"))
}

/// Final layer of each controller branch; replaced by actor/critic pairs in stage 3.
pub const BRANCH_FINALS: [&str; 3] = ["fc_b", "fc_h2", "fc_n"];

pub fn block_name(l: usize, rest: &str) -> String {
    format!("blocks.{l}.{rest}")
}

pub fn ctrl_name(l: usize, rest: &str) -> String {
    format!("ctrl.{l}.{rest}")
}

/// Initialization rule for a tensor, chosen by name.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

fn sample(init: Init, shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f64> {
    match init {
        Init::Zeros => Array2::zeros(shape),
        Init::Ones => Array2::ones(shape),
        Init::Normal(std) => {
            let dist = Normal::new(0.0, std).expect("valid std");
            Array2::from_shape_fn(shape, |_| dist.sample(rng))
        }
    }
}

/// Shape and initializer of every backbone tensor.
pub fn backbone_layout(cfg: &ValidConfig) -> Vec<(String, (usize, usize), Init)> {
    let c = cfg.embed_dim;
    let w = Init::Normal(0.02);
    let mut out = vec![
        ("embed.patch.weight".to_string(), (cfg.patch_dim, c), w),
        ("embed.patch.bias".to_string(), (1, c), Init::Zeros),
        ("embed.pos".to_string(), (cfg.num_tokens, c), w),
    ];
    if cfg.use_class_token {
        out.push(("embed.cls".to_string(), (1, c), w));
        out.push(("embed.cls_pos".to_string(), (1, c), w));
    }
    for l in 0..cfg.num_blocks {
        for norm in ["norm1", "norm2"] {
            out.push((block_name(l, &format!("{norm}.gamma")), (1, c), Init::Ones));
            out.push((block_name(l, &format!("{norm}.beta")), (1, c), Init::Zeros));
        }
        for proj in ["attn.q", "attn.k", "attn.v", "attn.proj"] {
            out.push((block_name(l, &format!("{proj}.weight")), (c, c), w));
            out.push((block_name(l, &format!("{proj}.bias")), (1, c), Init::Zeros));
        }
        out.push((block_name(l, "mlp.fc1.weight"), (c, cfg.mlp_hidden), w));
        out.push((block_name(l, "mlp.fc1.bias"), (1, cfg.mlp_hidden), Init::Zeros));
        out.push((block_name(l, "mlp.fc2.weight"), (cfg.mlp_hidden, c), w));
        out.push((block_name(l, "mlp.fc2.bias"), (1, c), Init::Zeros));
    }
    out.push(("norm.gamma".to_string(), (1, c), Init::Ones));
    out.push(("norm.beta".to_string(), (1, c), Init::Zeros));
    out.push(("head.weight".to_string(), (c, cfg.num_classes), w));
    out.push(("head.bias".to_string(), (1, cfg.num_classes), Init::Zeros));
    out
}

fn he(fan_in: usize) -> Init {
    Init::Normal((2.0 / fan_in as f64).sqrt())
}

fn linear(
    out: &mut Vec<(String, (usize, usize), Init)>,
    l: usize,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    init: Init,
) {
    out.push((ctrl_name(l, &format!("{name}.weight")), (fan_in, fan_out), init));
    out.push((ctrl_name(l, &format!("{name}.bias")), (1, fan_out), Init::Zeros));
}

/// Controller trunk tensors (everything except the branch finals).
pub fn controller_trunk_layout(cfg: &ValidConfig) -> Vec<(String, (usize, usize), Init)> {
    let (c, w) = (cfg.embed_dim, cfg.ctrl_width);
    let hd = cfg.num_heads * cfg.e_dprime;
    let mut out = Vec::new();
    for l in 0..cfg.num_blocks {
        linear(&mut out, l, "cnn.conv1", 9 * c, w, he(9 * c));
        linear(&mut out, l, "cnn.conv2", 9 * w, w, he(9 * w));
        linear(&mut out, l, "fc_h1", w, hd, he(w));
        linear(&mut out, l, "mlp_n.fc1", c, w, he(c));
        linear(&mut out, l, "mlp_n.fc2", w, w, he(w));
    }
    out
}

/// Branch-final layers producing one keep-logit per decision.
pub fn controller_final_layout(cfg: &ValidConfig) -> Vec<(String, (usize, usize), Init)> {
    let w = cfg.ctrl_width;
    let mut out = Vec::new();
    for l in 0..cfg.num_blocks {
        linear(&mut out, l, "fc_b", w, 1, Init::Normal(0.02));
        linear(&mut out, l, "fc_h2", cfg.e_dprime, 1, Init::Normal(0.02));
        linear(&mut out, l, "fc_n", w, 1, Init::Normal(0.02));
    }
    out
}

/// Stage-3 actor/critic output layers.
pub fn rl_head_layout(cfg: &ValidConfig) -> Vec<(String, (usize, usize), Init)> {
    let w = cfg.ctrl_width;
    let hd = cfg.num_heads * cfg.e_dprime;
    let small = Init::Normal(0.02);
    let mut out = Vec::new();
    for l in 0..cfg.num_blocks {
        linear(&mut out, l, "actor_b", w, 1, small);
        linear(&mut out, l, "critic_b", w, 1, small);
        linear(&mut out, l, "actor_h", cfg.e_dprime, 1, small);
        linear(&mut out, l, "critic_h", hd, 1, small);
        linear(&mut out, l, "actor_n", w, 1, small);
        linear(&mut out, l, "critic_n", w, 1, small);
    }
    out
}

pub fn init_layout<T: Scalar>(
    store: &mut ParamStore<T>,
    layout: &[(String, (usize, usize), Init)],
    rng: &mut ChaCha8Rng,
) {
    for (name, shape, init) in layout {
        store.insert(name.clone(), sample(*init, *shape, rng).mapv(T::of));
    }
}

/// Fresh backbone plus controller (trunk and branch finals).
pub fn init_model<T: Scalar>(cfg: &ValidConfig, seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_layout(&mut store, &backbone_layout(cfg), &mut rng);
    init_layout(&mut store, &controller_trunk_layout(cfg), &mut rng);
    init_layout(&mut store, &controller_final_layout(cfg), &mut rng);
    store
}

/// Re-sample one tensor with the initializer its layout entry prescribes.
pub fn reinit_tensor(shape: (usize, usize), init: Init, rng: &mut ChaCha8Rng) -> Array2<f64> {
    sample(init, shape, rng)
}

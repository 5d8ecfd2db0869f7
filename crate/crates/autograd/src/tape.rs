use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::scalar::{gelu, gelu_grad, sigmoid, softplus, Scalar};

/// Marks a gathered element that reads as zero (padding).
pub const PAD: usize = usize::MAX;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulBroadcast(usize, usize),
    AddBroadcast(usize, usize),
    Affine(usize, T),
    DivScalar(usize, T),
    Passthrough(usize),
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Array2<T>,
        rstd: Vec<T>,
    },
    Attention(Box<AttentionSaved<T>>),
    Gather {
        src: usize,
        index: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    Reshape(usize),
    GroupMean {
        src: usize,
        groups: Vec<Vec<usize>>,
    },
    SumCols(usize),
    SumAll(usize),
    ExpandCols {
        src: usize,
        width: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Array2<T>,
    },
    BernoulliLogProb {
        logits: usize,
        actions: Array2<T>,
    },
    BernoulliEntropy(usize),
}

struct AttentionSaved<T> {
    q: usize,
    k: usize,
    v: usize,
    mask: Option<usize>,
    batch: usize,
    tokens: usize,
    heads: usize,
    scale: T,
    // per (sample, head): masked probabilities and the unmasked-normalized weights
    probs: Vec<Array2<T>>,
    weights: Vec<Array2<T>>,
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-use reverse-mode tape. Build the forward graph with the op
/// methods, then call [`Tape::backward`].
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn std_owned<T: Scalar>(a: ArrayView2<'_, T>) -> Array2<T> {
    a.as_standard_layout().into_owned()
}

fn accumulate<T: Scalar>(grads: &mut [Option<Array2<T>>], idx: usize, g: Array2<T>) {
    match &mut grads[idx] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Sum `g` down to `shape`, undoing a broadcast of a (1,c), (r,1) or (1,1) operand.
fn reduce_to<T: Scalar>(g: &Array2<T>, shape: (usize, usize)) -> Array2<T> {
    let (r, c) = g.dim();
    match shape {
        s if s == (r, c) => g.clone(),
        (1, cc) if cc == c => g.sum_axis(Axis(0)).insert_axis(Axis(0)),
        (rr, 1) if rr == r => g.sum_axis(Axis(1)).insert_axis(Axis(1)),
        (1, 1) => Array2::from_elem((1, 1), g.sum()),
        other => panic!("cannot reduce {:?} to {:?}", (r, c), other),
    }
}

fn broadcast_ok(lhs: (usize, usize), rhs: (usize, usize)) -> bool {
    (rhs.0 == lhs.0 || rhs.0 == 1) && (rhs.1 == lhs.1 || rhs.1 == 1)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, parents: &[usize]) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf (gradients are tracked).
    pub fn param(&mut self, value: Array2<T>) -> Var {
        self.nodes.push(Node {
            value: value.as_standard_layout().into_owned(),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.nodes.push(Node {
            value: value.as_standard_layout().into_owned(),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dimension");
        let out = av.dot(bv);
        self.push(out, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = &self.nodes[a.0].value + &self.nodes[b.0].value;
        assert_eq!(self.shape(a), self.shape(b), "add shape");
        self.push(out, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape");
        let out = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(out, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape");
        let out = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(out, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    /// `a * m` with `m` broadcast from shape (1,c), (r,1) or (1,1).
    pub fn mul_broadcast(&mut self, a: Var, m: Var) -> Var {
        assert!(broadcast_ok(self.shape(a), self.shape(m)), "mul_broadcast shape");
        let out = &self.nodes[a.0].value * &self.nodes[m.0].value;
        self.push(out, Op::MulBroadcast(a.0, m.0), &[a.0, m.0])
    }

    /// `a + m` with `m` broadcast from shape (1,c), (r,1) or (1,1).
    pub fn add_broadcast(&mut self, a: Var, m: Var) -> Var {
        assert!(broadcast_ok(self.shape(a), self.shape(m)), "add_broadcast shape");
        let out = &self.nodes[a.0].value + &self.nodes[m.0].value;
        self.push(out, Op::AddBroadcast(a.0, m.0), &[a.0, m.0])
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.nodes[x.0].value.mapv(|v| scale * v + shift);
        self.push(out, Op::Affine(x.0, scale), &[x.0])
    }

    /// `x / d` elementwise for a constant `d`.
    pub fn div_scalar(&mut self, x: Var, d: T) -> Var {
        let out = self.nodes[x.0].value.mapv(|v| v / d);
        self.push(out, Op::DivScalar(x.0, d), &[x.0])
    }

    /// `x + c` for a constant array `c` of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Array2<T>) -> Var {
        let out = &self.nodes[x.0].value + c;
        self.push(out, Op::Passthrough(x.0), &[x.0])
    }

    /// Forward value `hard`, gradient passed unchanged to `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Array2<T>) -> Var {
        assert_eq!(self.shape(soft), hard.dim(), "straight_through shape");
        self.push(hard, Op::Passthrough(soft.0), &[soft.0])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.mapv(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x.0), &[x.0])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.mapv(gelu);
        self.push(out, Op::Gelu(x.0), &[x.0])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.mapv(sigmoid);
        self.push(out, Op::Sigmoid(x.0), &[x.0])
    }

    /// Row-wise layer normalization with affine parameters of shape (1, cols).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let xv = &self.nodes[x.0].value;
        let (r, c) = xv.dim();
        assert_eq!(self.nodes[gamma.0].value.dim(), (1, c));
        assert_eq!(self.nodes[beta.0].value.dim(), (1, c));
        let n = T::of(c as f64);
        let mut xhat = Array2::zeros((r, c));
        let mut rstd = Vec::with_capacity(r);
        for (row, mut out) in xv.rows().into_iter().zip(xhat.rows_mut()) {
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            Zip::from(&mut out).and(&row).for_each(|o, &v| *o = (v - mean) * rs);
            rstd.push(rs);
        }
        let out = &xhat * &self.nodes[gamma.0].value + &self.nodes[beta.0].value;
        self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            &[x.0, gamma.0, beta.0],
        )
    }

    /// Multi-head scaled dot-product attention over `batch` independent
    /// sequences of `tokens` rows each. `q`, `k`, `v` are `(batch*tokens, heads*e)`;
    /// head `h` owns columns `[h*e, (h+1)*e)`. The optional key mask
    /// `(batch*tokens, 1)` weights each key inside the softmax so that a zero
    /// entry removes that key exactly. Rows with no active key produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_mask: Option<Var>,
        batch: usize,
        heads: usize,
    ) -> Var {
        let (rows, width) = self.shape(q);
        assert_eq!(self.shape(k), (rows, width));
        assert_eq!(self.shape(v), (rows, width));
        assert!(batch > 0 && rows % batch == 0 && heads > 0 && width % heads == 0);
        let tokens = rows / batch;
        let e = width / heads;
        if let Some(m) = key_mask {
            assert_eq!(self.shape(m), (rows, 1));
        }
        let scale = T::one() / T::of(e as f64).sqrt();
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        let vv = &self.nodes[v.0].value;
        let mv = key_mask.map(|m| &self.nodes[m.0].value);
        let mut out = Array2::zeros((rows, width));
        let mut probs = Vec::with_capacity(batch * heads);
        let mut weights = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            let r0 = b * tokens;
            let r1 = r0 + tokens;
            let mask: Vec<T> = match mv {
                Some(m) => m.slice(s![r0..r1, 0]).to_vec(),
                None => vec![T::one(); tokens],
            };
            for h in 0..heads {
                let c0 = h * e;
                let c1 = c0 + e;
                let qs = qv.slice(s![r0..r1, c0..c1]);
                let ks = kv.slice(s![r0..r1, c0..c1]);
                let vs = vv.slice(s![r0..r1, c0..c1]);
                let scores = qs.dot(&ks.t()) * scale;
                let mut p = Array2::zeros((tokens, tokens));
                let mut w = Array2::zeros((tokens, tokens));
                for i in 0..tokens {
                    let mut max = T::neg_infinity();
                    for j in 0..tokens {
                        if mask[j] != T::zero() && scores[[i, j]] > max {
                            max = scores[[i, j]];
                        }
                    }
                    if max == T::neg_infinity() {
                        continue;
                    }
                    let mut z = T::zero();
                    for j in 0..tokens {
                        let u = (scores[[i, j]] - max).exp();
                        w[[i, j]] = u;
                        z += mask[j] * u;
                    }
                    if z == T::zero() {
                        w.row_mut(i).fill(T::zero());
                        continue;
                    }
                    for j in 0..tokens {
                        w[[i, j]] /= z;
                        p[[i, j]] = mask[j] * w[[i, j]];
                    }
                }
                out.slice_mut(s![r0..r1, c0..c1]).assign(&p.dot(&vs));
                probs.push(p);
                weights.push(w);
            }
        }
        let mut parents = vec![q.0, k.0, v.0];
        if let Some(m) = key_mask {
            parents.push(m.0);
        }
        self.push(
            out,
            Op::Attention(Box::new(AttentionSaved {
                q: q.0,
                k: k.0,
                v: v.0,
                mask: key_mask.map(|m| m.0),
                batch,
                tokens,
                heads,
                scale,
                probs,
                weights,
            })),
            &parents,
        )
    }

    /// Element gather over the row-major flattening of `src`. Entries equal to
    /// [`PAD`] read as zero.
    pub fn gather(&mut self, src: Var, index: Vec<usize>, shape: (usize, usize)) -> Var {
        assert_eq!(index.len(), shape.0 * shape.1, "gather index length");
        let sv = &self.nodes[src.0].value;
        let flat = sv.as_slice().expect("standard layout");
        let data: Vec<T> = index
            .iter()
            .map(|&i| if i == PAD { T::zero() } else { flat[i] })
            .collect();
        let out = Array2::from_shape_vec(shape, data).expect("gather shape");
        self.push(out, Op::Gather { src: src.0, index }, &[src.0])
    }

    /// Select (and possibly repeat) whole rows of `src`.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Var {
        let cols = self.shape(src).1;
        let index: Vec<usize> = rows
            .iter()
            .flat_map(|&r| (0..cols).map(move |c| r * cols + c))
            .collect();
        self.gather(src, index, (rows.len(), cols))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows column mismatch");
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(out, Op::ConcatRows(idx.clone()), &idx)
    }

    /// Row-major reinterpretation with the same element count.
    pub fn reshape(&mut self, x: Var, shape: (usize, usize)) -> Var {
        let v = self.nodes[x.0].value.clone();
        let out = v.into_shape_with_order(shape).expect("reshape element count");
        self.push(out, Op::Reshape(x.0), &[x.0])
    }

    /// Output row `i` is the mean of the rows of `src` listed in `groups[i]`.
    pub fn group_mean(&mut self, src: Var, groups: Vec<Vec<usize>>) -> Var {
        let sv = &self.nodes[src.0].value;
        let cols = sv.ncols();
        let mut out = Array2::zeros((groups.len(), cols));
        for (i, g) in groups.iter().enumerate() {
            assert!(!g.is_empty(), "empty pooling group");
            let inv = T::one() / T::of(g.len() as f64);
            let mut row = out.row_mut(i);
            for &r in g {
                row += &sv.row(r);
            }
            row *= inv;
        }
        self.push(out, Op::GroupMean { src: src.0, groups }, &[src.0])
    }

    /// (r, c) -> (r, 1)
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::SumCols(x.0), &[x.0])
    }

    /// (r, c) -> (1, 1)
    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.nodes[x.0].value.sum());
        self.push(out, Op::SumAll(x.0), &[x.0])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len();
        let s = self.sum_all(x);
        self.affine(s, T::one() / T::of(n as f64), T::zero())
    }

    /// Repeat every column `width` times: (r, c) -> (r, c*width).
    pub fn expand_cols(&mut self, x: Var, width: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let (r, c) = xv.dim();
        let out = Array2::from_shape_fn((r, c * width), |(i, j)| xv[[i, j / width]]);
        self.push(out, Op::ExpandCols { src: x.0, width }, &[x.0])
    }

    /// Per-row softmax cross-entropy, shape (rows, 1).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = &self.nodes[logits.0].value;
        assert_eq!(lv.nrows(), labels.len(), "one label per row");
        let mut probs = Array2::zeros(lv.dim());
        let mut out = Array2::zeros((lv.nrows(), 1));
        for (i, row) in lv.rows().into_iter().enumerate() {
            assert!(labels[i] < row.len(), "label out of range");
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + z.ln();
            for (j, &v) in row.iter().enumerate() {
                probs[[i, j]] = (v - lse).exp();
            }
            out[[i, 0]] = lse - row[labels[i]];
        }
        self.push(
            out,
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            &[logits.0],
        )
    }

    /// Log-probability of binary `actions` under Bernoulli(sigmoid(logits)).
    pub fn bernoulli_log_prob(&mut self, logits: Var, actions: Array2<T>) -> Var {
        let lv = &self.nodes[logits.0].value;
        assert_eq!(lv.dim(), actions.dim());
        let out = Zip::from(lv)
            .and(&actions)
            .map_collect(|&l, &a| -(a * softplus(-l) + (T::one() - a) * softplus(l)));
        self.push(
            out,
            Op::BernoulliLogProb {
                logits: logits.0,
                actions,
            },
            &[logits.0],
        )
    }

    /// Entropy of Bernoulli(sigmoid(logits)), elementwise.
    pub fn bernoulli_entropy(&mut self, logits: Var) -> Var {
        let out = self.nodes[logits.0]
            .value
            .mapv(|l| softplus(-l) + (T::one() - sigmoid(l)) * l);
        self.push(out, Op::BernoulliEntropy(logits.0), &[logits.0])
    }

    /// Reverse pass from a scalar (1,1) output.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar");
        self.backward_seeded(&[(loss, Array2::from_elem((1, 1), T::one()))])
    }

    /// Reverse pass with explicit output cotangents.
    pub fn backward_seeded(&self, seeds: &[(Var, Array2<T>)]) -> Grads<T> {
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(self.shape(*v), g.dim(), "seed shape");
            accumulate(&mut grads, v.0, g.clone());
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn backprop(&self, idx: usize, g: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        let val = |i: usize| &self.nodes[i].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.dot(&val(*b).t()));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, val(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.mapv(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g * val(*b));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g * val(*a));
                }
            }
            Op::MulBroadcast(a, m) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g * val(*m));
                }
                if self.needs(*m) {
                    let full = g * val(*a);
                    accumulate(grads, *m, reduce_to(&full, val(*m).dim()));
                }
            }
            Op::AddBroadcast(a, m) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*m) {
                    accumulate(grads, *m, reduce_to(g, val(*m).dim()));
                }
            }
            Op::Affine(x, scale) => {
                let s = *scale;
                accumulate(grads, *x, g.mapv(|v| v * s));
            }
            Op::DivScalar(x, d) => {
                let d = *d;
                accumulate(grads, *x, g.mapv(|v| v / d));
            }
            Op::Passthrough(x) => accumulate(grads, *x, g.clone()),
            Op::Relu(x) => {
                let d = Zip::from(g)
                    .and(val(*x))
                    .map_collect(|&gv, &xv| if xv > T::zero() { gv } else { T::zero() });
                accumulate(grads, *x, d);
            }
            Op::Gelu(x) => {
                let d = Zip::from(g).and(val(*x)).map_collect(|&gv, &xv| gv * gelu_grad(xv));
                accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[idx].value;
                let d = Zip::from(g).and(y).map_collect(|&gv, &yv| gv * yv * (T::one() - yv));
                accumulate(grads, *x, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                if self.needs(*beta) {
                    accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.needs(*gamma) {
                    let gg = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(grads, *gamma, gg);
                }
                if self.needs(*x) {
                    let dxhat = g * val(*gamma);
                    let c = T::of(xhat.ncols() as f64);
                    let mut dx = Array2::zeros(xhat.dim());
                    for (i, mut out) in dx.rows_mut().into_iter().enumerate() {
                        let dr = dxhat.row(i);
                        let xr = xhat.row(i);
                        let mean_d = dr.sum() / c;
                        let mean_dx = dr.dot(&xr) / c;
                        let rs = rstd[i];
                        Zip::from(&mut out)
                            .and(&dr)
                            .and(&xr)
                            .for_each(|o, &d, &xh| *o = rs * (d - mean_d - xh * mean_dx));
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Attention(sv) => self.backprop_attention(sv, g, grads),
            Op::Gather { src, index } => {
                let (r, c) = val(*src).dim();
                let mut d = vec![T::zero(); r * c];
                let gs = g.as_slice().expect("standard layout");
                for (o, &i) in index.iter().enumerate() {
                    if i != PAD {
                        d[i] += gs[o];
                    }
                }
                accumulate(grads, *src, Array2::from_shape_vec((r, c), d).unwrap());
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let n = val(p).nrows();
                    if self.needs(p) {
                        accumulate(grads, p, g.slice(s![r0..r0 + n, ..]).to_owned());
                    }
                    r0 += n;
                }
            }
            Op::Reshape(x) => {
                let shape = val(*x).dim();
                let d = std_owned(g.view()).into_shape_with_order(shape).unwrap();
                accumulate(grads, *x, d);
            }
            Op::GroupMean { src, groups } => {
                let mut d = Array2::zeros(val(*src).dim());
                for (i, grp) in groups.iter().enumerate() {
                    let inv = T::one() / T::of(grp.len() as f64);
                    let gi = g.row(i).mapv(|v| v * inv);
                    for &r in grp {
                        let mut row = d.row_mut(r);
                        row += &gi;
                    }
                }
                accumulate(grads, *src, d);
            }
            Op::SumCols(x) => {
                let (r, c) = val(*x).dim();
                let d = Array2::from_shape_fn((r, c), |(i, _)| g[[i, 0]]);
                accumulate(grads, *x, d);
            }
            Op::SumAll(x) => {
                let d = Array2::from_elem(val(*x).dim(), g[[0, 0]]);
                accumulate(grads, *x, d);
            }
            Op::ExpandCols { src, width } => {
                let (r, c) = val(*src).dim();
                let w = *width;
                let d = Array2::from_shape_fn((r, c), |(i, j)| {
                    (0..w).map(|k| g[[i, j * w + k]]).sum::<T>()
                });
                accumulate(grads, *src, d);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let mut d = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    d[[i, y]] -= T::one();
                    let gi = g[[i, 0]];
                    d.row_mut(i).mapv_inplace(|v| v * gi);
                }
                accumulate(grads, *logits, d);
            }
            Op::BernoulliLogProb { logits, actions } => {
                let d = Zip::from(g)
                    .and(val(*logits))
                    .and(actions)
                    .map_collect(|&gv, &l, &a| gv * (a - sigmoid(l)));
                accumulate(grads, *logits, d);
            }
            Op::BernoulliEntropy(x) => {
                let d = Zip::from(g).and(val(*x)).map_collect(|&gv, &l| {
                    let p = sigmoid(l);
                    -gv * l * p * (T::one() - p)
                });
                accumulate(grads, *x, d);
            }
        }
    }

    fn backprop_attention(
        &self,
        sv: &AttentionSaved<T>,
        g: &Array2<T>,
        grads: &mut [Option<Array2<T>>],
    ) {
        let qv = &self.nodes[sv.q].value;
        let kv = &self.nodes[sv.k].value;
        let vv = &self.nodes[sv.v].value;
        let (rows, width) = qv.dim();
        let e = width / sv.heads;
        let t = sv.tokens;
        let mut dq = Array2::zeros((rows, width));
        let mut dk = Array2::zeros((rows, width));
        let mut dv = Array2::zeros((rows, width));
        let mut dm = Array2::zeros((rows, 1));
        for b in 0..sv.batch {
            let (r0, r1) = (b * t, (b + 1) * t);
            for h in 0..sv.heads {
                let (c0, c1) = (h * e, (h + 1) * e);
                let p = &sv.probs[b * sv.heads + h];
                let w = &sv.weights[b * sv.heads + h];
                let go = g.slice(s![r0..r1, c0..c1]);
                let vs = vv.slice(s![r0..r1, c0..c1]);
                dv.slice_mut(s![r0..r1, c0..c1]).assign(&p.t().dot(&go));
                let dp = go.dot(&vs.t());
                let mut ds = Array2::zeros((t, t));
                for i in 0..t {
                    let rho: T = (0..t).map(|j| dp[[i, j]] * p[[i, j]]).sum();
                    for j in 0..t {
                        let centered = dp[[i, j]] - rho;
                        ds[[i, j]] = p[[i, j]] * centered;
                        dm[[r0 + j, 0]] += w[[i, j]] * centered;
                    }
                }
                ds *= sv.scale;
                let qs = qv.slice(s![r0..r1, c0..c1]);
                let ks = kv.slice(s![r0..r1, c0..c1]);
                dq.slice_mut(s![r0..r1, c0..c1]).assign(&ds.dot(&ks));
                dk.slice_mut(s![r0..r1, c0..c1]).assign(&ds.t().dot(&qs));
            }
        }
        if self.needs(sv.q) {
            accumulate(grads, sv.q, dq);
        }
        if self.needs(sv.k) {
            accumulate(grads, sv.k, dk);
        }
        if self.needs(sv.v) {
            accumulate(grads, sv.v, dv);
        }
        if let Some(m) = sv.mask {
            if self.needs(m) {
                accumulate(grads, m, dm);
            }
        }
    }
}

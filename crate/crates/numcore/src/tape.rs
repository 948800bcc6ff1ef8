//! The computation record and its differentiable primitives.
//!
//! Every primitive appends one node holding its output value, the ids of its
//! inputs and whatever it saved for the backward pass. Nodes are only ever
//! appended, so inputs always precede their consumers and a single reverse
//! sweep visits each operation exactly once.

use std::collections::HashMap;

use crate::error::{NumError, Result};
use crate::float::Float;
use crate::kernels::{gemm, MatMut, MatRef};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch geometry for fused multi-head attention.
///
/// Queries are `[batch * q_len, dim]`, keys and values `[batch * k_len, dim]`.
/// `key_mask[b * k_len + j] == false` hides key `j` of batch item `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub causal: bool,
    pub key_mask: Option<Vec<bool>>,
}

/// Targets for [`Tape::cross_entropy_smoothed`]: one optional class per row
/// (`None` rows are padding and excluded), label smoothing in `[0, 1)` and
/// optional per-row weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CeTargets<T> {
    pub ids: Vec<Option<usize>>,
    pub smoothing: f64,
    pub weights: Option<Vec<T>>,
}

impl<T> CeTargets<T> {
    pub fn plain(ids: Vec<Option<usize>>) -> Self {
        CeTargets {
            ids,
            smoothing: 0.0,
            weights: None,
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    MatMul { a: Var, b: Var, bt: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale { x: Var, c: T },
    MulScalar { x: Var, s: Var },
    Exp(Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    L2Normalize { x: Var, axis: usize, norms: Vec<T> },
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Var, Var),
    MaskedMeanRows { x: Var, mask: Vec<bool>, groups: usize, counts: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, layout: AttentionLayout, probs: Vec<T> },
    CrossEntropy { logits: Var, targets: CeTargets<T>, probs: Vec<T>, denom: usize },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale { .. } => "scale",
            Op::MulScalar { .. } => "mul_scalar",
            Op::Exp(_) => "exp",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Transpose(_) => "transpose",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::MaskedMeanRows { .. } => "masked_mean_rows",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ConcatRows(a, b) => vec![*a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::Scale { x, .. } => vec![*x],
            Op::MulScalar { x, s } => vec![*x, *s],
            Op::Exp(x) | Op::Gelu(x) | Op::Sum(x) | Op::Mean(x) | Op::Transpose(x) => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Softmax { x, .. } | Op::LogSoftmax { x, .. } | Op::L2Normalize { x, .. } => vec![*x],
            Op::GatherRows { x, .. } | Op::MaskedMeanRows { x, .. } => vec![*x],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Summary of one recorded operation, for inspection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordEntry {
    pub index: usize,
    pub op: &'static str,
    pub inputs: Vec<usize>,
}

/// Append-only computation record.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bindings: Vec<(Var, u64, ParamId)>,
    bound: HashMap<(u64, ParamId), Var>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        _ => {
            let cols = *shape.last().unwrap();
            (shape[..shape.len() - 1].iter().product(), cols)
        }
    }
}

/// (outer, axis length, inner) decomposition for reductions along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bindings: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operations in execution order with their input indices.
    pub fn record(&self) -> Vec<RecordEntry> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(index, n)| RecordEntry {
                index,
                op: n.op.name(),
                inputs: n.op.inputs().into_iter().map(|v| v.0).collect(),
            })
            .collect()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> Result<T> {
        match self.nodes[v.0].value.as_slice() {
            [x] => Ok(*x),
            _ => Err(NumError::Contract(format!(
                "expected a scalar, found shape {:?}",
                self.nodes[v.0].shape
            ))),
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let needs_grad = match &op {
            Op::Leaf | Op::Constant => false,
            other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor as a leaf. Gradients are tracked iff it requires grad.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf);
        self.nodes[v.0].needs_grad = t.requires_grad();
        v
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, value: Vec<T>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != value.len() {
            return Err(NumError::shape("constant", &shape, &[value.len()]));
        }
        Ok(self.push(shape, value, Op::Constant))
    }

    /// Binds a stored parameter as a leaf; repeated binds return the same var.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.tag(), id);
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let t = store.tensor(id);
        let v = self.leaf(t);
        self.bindings.push((v, store.tag(), id));
        self.bound.insert(key, v);
        v
    }

    /// Identity in the forward pass; blocks all gradient flow backwards.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let n = &self.nodes[x.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Constant)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(NumError::shape(op, sa, sb));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(NumError::shape(op, s, &[0, 0])),
        }
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, bt: bool) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (br, bc) = self.matrix_dims("matmul", b)?;
        let (kb, n) = if bt { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(NumError::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        {
            let av = MatRef::rm(self.value(a), 0, m, k, k);
            let bv = if bt {
                MatRef::rm(self.value(b), 0, n, k, k).t()
            } else {
                MatRef::rm(self.value(b), 0, k, n, n)
            };
            gemm(T::one(), av, bv, T::zero(), MatMut::rm(&mut out, 0, m, n, n));
        }
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, bt }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b)))
    }

    /// Adds `bias` (length = last dimension of `x`) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(x));
        if self.shape(bias) != [cols] {
            return Err(NumError::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bb)| v + bb))
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias { x, bias }))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale { x, c })
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = match self.value(s) {
            [v] => *v,
            _ => return Err(NumError::shape("mul_scalar", self.shape(x), self.shape(s))),
        };
        let out = self.value(x).iter().map(|&v| v * sv).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulScalar { x, s }))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.exp()).collect();
        self.push(self.shape(x).to_vec(), out, Op::Exp(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu_fwd(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x))
    }

    /// Normalizes each row over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(NumError::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let eps = T::of(eps);
        let n = T::of(cols as f64);
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(NumError::Index {
                op,
                index: axis,
                size: rank,
            });
        }
        Ok(())
    }

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let out = softmax_along(self.value(x), &shape, axis, false);
        Ok(self.push(shape, out, Op::Softmax { x, axis }))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let out = softmax_along(self.value(x), &shape, axis, true);
        Ok(self.push(shape, out, Op::LogSoftmax { x, axis }))
    }

    /// Scales every slice along `axis` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("l2_normalize", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let xs = self.value(x);
        let mut out = vec![T::zero(); xs.len()];
        let mut norms = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let norm = (0..len).map(|j| xs[at(j)] * xs[at(j)]).sum::<T>().sqrt();
                if norm == T::zero() || !norm.is_finite() {
                    return Err(NumError::Degenerate {
                        op: "l2_normalize",
                        detail: format!("slice {} has norm {}", o * inner + i, norm),
                    });
                }
                norms[o * inner + i] = norm;
                for j in 0..len {
                    out[at(j)] = xs[at(j)] / norm;
                }
            }
        }
        Ok(self.push(shape, out, Op::L2Normalize { x, axis, norms }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum::<T>();
        self.push(vec![], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let s = xs.iter().copied().sum::<T>() / T::of(xs.len().max(1) as f64);
        self.push(vec![], vec![s], Op::Mean(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", x)?;
        let xs = self.value(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xs[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose(x)))
    }

    /// Row `idx[i]` of `x` becomes row `i` of the output (embedding lookup,
    /// row selection and interleaving all reduce to this).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("gather_rows", x)?;
        let xs = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &r in idx {
            if r >= rows {
                return Err(NumError::Index {
                    op: "gather_rows",
                    index: r,
                    size: rows,
                });
            }
            out.extend_from_slice(&xs[r * cols..(r + 1) * cols]);
        }
        Ok(self.push(
            vec![idx.len(), cols],
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.matrix_dims("concat_rows", a)?;
        let (rb, cb) = self.matrix_dims("concat_rows", b)?;
        if ca != cb {
            return Err(NumError::shape("concat_rows", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).to_vec();
        out.extend_from_slice(self.value(b));
        Ok(self.push(vec![ra + rb, ca], out, Op::ConcatRows(a, b)))
    }

    /// `x` holds `groups` consecutive blocks of rows; returns the mean of the
    /// rows with `mask == true` in each block.
    pub fn masked_mean_rows(&mut self, x: Var, mask: &[bool], groups: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("masked_mean_rows", x)?;
        if groups == 0 || rows % groups != 0 || mask.len() != rows {
            return Err(NumError::shape("masked_mean_rows", self.shape(x), &[groups, mask.len()]));
        }
        let per = rows / groups;
        let xs = self.value(x);
        let mut out = vec![T::zero(); groups * cols];
        let mut counts = vec![0usize; groups];
        for g in 0..groups {
            for r in g * per..(g + 1) * per {
                if mask[r] {
                    counts[g] += 1;
                    for c in 0..cols {
                        out[g * cols + c] += xs[r * cols + c];
                    }
                }
            }
            if counts[g] == 0 {
                return Err(NumError::Degenerate {
                    op: "masked_mean_rows",
                    detail: format!("group {g} has no unmasked rows"),
                });
            }
            let inv = T::one() / T::of(counts[g] as f64);
            out[g * cols..(g + 1) * cols].iter_mut().for_each(|v| *v *= inv);
        }
        Ok(self.push(
            vec![groups, cols],
            out,
            Op::MaskedMeanRows {
                x,
                mask: mask.to_vec(),
                groups,
                counts,
            },
        ))
    }

    /// Fused scaled dot-product multi-head attention.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (qr, d) = self.matrix_dims("attention", q)?;
        let (kr, kd) = self.matrix_dims("attention", k)?;
        let (vr, vd) = self.matrix_dims("attention", v)?;
        let AttentionLayout {
            batch,
            q_len,
            k_len,
            heads,
            causal,
            ..
        } = layout;
        if kd != d || vd != d || kr != vr || qr != batch * q_len || kr != batch * k_len {
            return Err(NumError::shape("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(NumError::Contract(format!("attention: dim {d} not divisible by {heads} heads")));
        }
        if causal && q_len != k_len {
            return Err(NumError::Contract("attention: causal mask needs q_len == k_len".into()));
        }
        if let Some(m) = &layout.key_mask {
            if m.len() != batch * k_len {
                return Err(NumError::shape("attention", &[batch * k_len], &[m.len()]));
            }
        }
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![T::zero(); qr * d];
        let mut probs = vec![T::zero(); batch * heads * q_len * k_len];
        for b in 0..batch {
            for h in 0..heads {
                let p_off = (b * heads + h) * q_len * k_len;
                let scores = &mut probs[p_off..p_off + q_len * k_len];
                gemm(
                    scale,
                    MatRef::rm(qs, b * q_len * d + h * dh, q_len, dh, d),
                    MatRef::rm(ks, b * k_len * d + h * dh, k_len, dh, d).t(),
                    T::zero(),
                    MatMut::rm(scores, 0, q_len, k_len, k_len),
                );
                for i in 0..q_len {
                    let row = &mut scores[i * k_len..(i + 1) * k_len];
                    let visible = |j: usize| {
                        !(causal && j > i)
                            && layout.key_mask.as_ref().is_none_or(|m| m[b * k_len + j])
                    };
                    let mut max = T::neg_infinity();
                    for (j, &s) in row.iter().enumerate() {
                        if visible(j) && s > max {
                            max = s;
                        }
                    }
                    if max == T::neg_infinity() {
                        row.iter_mut().for_each(|s| *s = T::zero());
                        continue;
                    }
                    let mut total = T::zero();
                    for (j, s) in row.iter_mut().enumerate() {
                        *s = if visible(j) { (*s - max).exp() } else { T::zero() };
                        total += *s;
                    }
                    row.iter_mut().for_each(|s| *s /= total);
                }
                gemm(
                    T::one(),
                    MatRef::rm(&probs[p_off..p_off + q_len * k_len], 0, q_len, k_len, k_len),
                    MatRef::rm(vs, b * k_len * d + h * dh, k_len, dh, d),
                    T::zero(),
                    MatMut::rm(&mut out, b * q_len * d + h * dh, q_len, dh, d),
                );
            }
        }
        Ok(self.push(
            vec![qr, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
        ))
    }

    /// Mean over non-padding rows of the label-smoothed negative log-likelihood.
    ///
    /// With smoothing `ε` over `V` classes the target distribution puts
    /// `1 - ε + ε/V` on the labelled class and `ε/V` elsewhere. Row weights
    /// scale each row's contribution; the denominator is the number of
    /// non-padding rows.
    pub fn cross_entropy_smoothed(&mut self, logits: Var, targets: CeTargets<T>) -> Result<Var> {
        let (rows, classes) = self.matrix_dims("cross_entropy", logits)?;
        if targets.ids.len() != rows {
            return Err(NumError::shape("cross_entropy", &[rows, classes], &[targets.ids.len()]));
        }
        if let Some(w) = &targets.weights {
            if w.len() != rows {
                return Err(NumError::shape("cross_entropy", &[rows], &[w.len()]));
            }
        }
        if !(0.0..1.0).contains(&targets.smoothing) {
            return Err(NumError::Contract(format!(
                "label smoothing {} outside [0, 1)",
                targets.smoothing
            )));
        }
        for &t in targets.ids.iter().flatten() {
            if t >= classes {
                return Err(NumError::Index {
                    op: "cross_entropy",
                    index: t,
                    size: classes,
                });
            }
        }
        let logp = softmax_along(self.value(logits), &[rows, classes], 1, true);
        let eps = T::of(targets.smoothing);
        let off = eps / T::of(classes as f64);
        let on = T::one() - eps;
        let mut total = T::zero();
        let mut denom = 0usize;
        for (r, t) in targets.ids.iter().enumerate() {
            let Some(t) = *t else { continue };
            denom += 1;
            let row = &logp[r * classes..(r + 1) * classes];
            let mut nll = -on * row[t];
            if eps > T::zero() {
                nll -= off * row.iter().copied().sum::<T>();
            }
            let w = targets.weights.as_ref().map_or(T::one(), |w| w[r]);
            total += w * nll;
        }
        let loss = if denom == 0 {
            T::zero()
        } else {
            total / T::of(denom as f64)
        };
        let probs = logp.iter().map(|v| v.exp()).collect();
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                denom,
            },
        ))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NumError::Contract(format!(
                "backward needs a scalar loss, found shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients {
            leaves,
            bindings: self.bindings.clone(),
        })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b, bt } => {
                let (m, k) = rows_cols(&nodes[a.0].shape);
                let n = node.shape[1];
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                acc(*a, &mut |ga| {
                    let bview = if *bt {
                        MatRef::rm(bv, 0, n, k, k)
                    } else {
                        MatRef::rm(bv, 0, k, n, n).t()
                    };
                    gemm(T::one(), MatRef::rm(g, 0, m, n, n), bview, T::one(), MatMut::rm(ga, 0, m, k, k));
                });
                acc(*b, &mut |gb| {
                    if *bt {
                        gemm(
                            T::one(),
                            MatRef::rm(g, 0, m, n, n).t(),
                            MatRef::rm(av, 0, m, k, k),
                            T::one(),
                            MatMut::rm(gb, 0, n, k, k),
                        );
                    } else {
                        gemm(
                            T::one(),
                            MatRef::rm(av, 0, m, k, k).t(),
                            MatRef::rm(g, 0, m, n, n),
                            T::one(),
                            MatMut::rm(gb, 0, k, n, n),
                        );
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |ga| {
                    for ((d, &s), &o) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s * o;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((d, &s), &o) in gb.iter_mut().zip(g).zip(av) {
                        *d += s * o;
                    }
                });
            }
            Op::AddBias { x, bias } => {
                acc(*x, &mut |gx| add_into(gx, g));
                let cols = nodes[bias.0].value.len();
                acc(*bias, &mut |gb| {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale { x, c } => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s * *c));
            }
            Op::MulScalar { x, s } => {
                let sv = nodes[s.0].value[0];
                let xv = &nodes[x.0].value;
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(d, &u)| *d += u * sv));
                acc(*s, &mut |gs| {
                    gs[0] += g.iter().zip(xv).map(|(&u, &w)| u * w).sum::<T>();
                });
            }
            Op::Exp(x) => {
                let y = &node.value;
                acc(*x, &mut |gx| {
                    for ((d, &s), &o) in gx.iter_mut().zip(g).zip(y) {
                        *d += s * o;
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = &nodes[x.0].value;
                acc(*x, &mut |gx| {
                    for ((d, &s), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *d += s * gelu_grad(v);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let cols = nodes[gain.0].value.len();
                let gv = &nodes[gain.0].value;
                let n = T::of(cols as f64);
                acc(*x, &mut |gx| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let (gr, hr) = (&g[span.clone()], &xhat[span.clone()]);
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for c in 0..cols {
                            let d = gr[c] * gv[c];
                            mean_d += d;
                            mean_dh += d * hr[c];
                        }
                        mean_d /= n;
                        mean_dh /= n;
                        let out = &mut gx[span];
                        for c in 0..cols {
                            let d = gr[c] * gv[c];
                            out[c] += *rs * (d - mean_d - hr[c] * mean_dh);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for gr in g.chunks(cols) {
                        add_into(gb, gr);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                let y = &node.value;
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot = (0..len).map(|j| g[at(j)] * y[at(j)]).sum::<T>();
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                let y = &node.value;
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let total = (0..len).map(|j| g[at(j)]).sum::<T>();
                            for j in 0..len {
                                gx[at(j)] += g[at(j)] - y[at(j)].exp() * total;
                            }
                        }
                    }
                });
            }
            Op::L2Normalize { x, axis, norms } => {
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                let y = &node.value;
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let norm = norms[o * inner + i];
                            let dot = (0..len).map(|j| g[at(j)] * y[at(j)]).sum::<T>();
                            for j in 0..len {
                                gx[at(j)] += (g[at(j)] - y[at(j)] * dot) / norm;
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(x) => {
                let n = T::of(nodes[x.0].value.len().max(1) as f64);
                acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Transpose(x) => {
                let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let cols = node.shape[1];
                acc(*x, &mut |gx| {
                    for (i, &r) in idx.iter().enumerate() {
                        add_into(&mut gx[r * cols..(r + 1) * cols], &g[i * cols..(i + 1) * cols]);
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let split = nodes[a.0].value.len();
                acc(*a, &mut |ga| add_into(ga, &g[..split]));
                acc(*b, &mut |gb| add_into(gb, &g[split..]));
            }
            Op::MaskedMeanRows {
                x,
                mask,
                groups,
                counts,
            } => {
                let cols = node.shape[1];
                let per = mask.len() / groups;
                acc(*x, &mut |gx| {
                    for gi in 0..*groups {
                        let inv = T::one() / T::of(counts[gi] as f64);
                        for r in gi * per..(gi + 1) * per {
                            if mask[r] {
                                for c in 0..cols {
                                    gx[r * cols + c] += g[gi * cols + c] * inv;
                                }
                            }
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => self.attention_backward(*q, *k, *v, layout, probs, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                denom,
            } => {
                if *denom == 0 {
                    return;
                }
                let classes = nodes[logits.0].shape[1];
                let eps = T::of(targets.smoothing);
                let off = eps / T::of(classes as f64);
                let on = T::one() - eps;
                let scale = g[0] / T::of(*denom as f64);
                acc(*logits, &mut |gl| {
                    for (r, t) in targets.ids.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let w = targets.weights.as_ref().map_or(T::one(), |w| w[r]) * scale;
                        let row = &probs[r * classes..(r + 1) * classes];
                        let out = &mut gl[r * classes..(r + 1) * classes];
                        for c in 0..classes {
                            let mut target = off;
                            if c == t {
                                target += on;
                            }
                            out[c] += w * (row[c] - target);
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let nodes = &self.nodes;
        let d = nodes[q.0].shape[1];
        let AttentionLayout {
            batch,
            q_len,
            k_len,
            heads,
            ..
        } = *layout;
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qs, ks, vs) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
        let ensure = |var: Var, grads: &mut [Option<Vec<T>>]| {
            if nodes[var.0].needs_grad && grads[var.0].is_none() {
                grads[var.0] = Some(vec![T::zero(); nodes[var.0].value.len()]);
            }
        };
        ensure(q, grads);
        ensure(k, grads);
        ensure(v, grads);
        let mut dp = vec![T::zero(); q_len * k_len];
        for b in 0..batch {
            for h in 0..heads {
                let p_off = (b * heads + h) * q_len * k_len;
                let p = &probs[p_off..p_off + q_len * k_len];
                let g_view = MatRef::rm(g, b * q_len * d + h * dh, q_len, dh, d);
                if let Some(gv) = grads[v.0].as_mut().filter(|_| nodes[v.0].needs_grad) {
                    gemm(
                        T::one(),
                        MatRef::rm(p, 0, q_len, k_len, k_len).t(),
                        g_view,
                        T::one(),
                        MatMut::rm(gv, b * k_len * d + h * dh, k_len, dh, d),
                    );
                }
                if !nodes[q.0].needs_grad && !nodes[k.0].needs_grad {
                    continue;
                }
                gemm(
                    T::one(),
                    g_view,
                    MatRef::rm(vs, b * k_len * d + h * dh, k_len, dh, d).t(),
                    T::zero(),
                    MatMut::rm(&mut dp, 0, q_len, k_len, k_len),
                );
                for i in 0..q_len {
                    let pr = &p[i * k_len..(i + 1) * k_len];
                    let dr = &mut dp[i * k_len..(i + 1) * k_len];
                    let dot = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                    for (d_ij, &p_ij) in dr.iter_mut().zip(pr) {
                        *d_ij = p_ij * (*d_ij - dot);
                    }
                }
                if let Some(gq) = grads[q.0].as_mut().filter(|_| nodes[q.0].needs_grad) {
                    gemm(
                        scale,
                        MatRef::rm(&dp, 0, q_len, k_len, k_len),
                        MatRef::rm(ks, b * k_len * d + h * dh, k_len, dh, d),
                        T::one(),
                        MatMut::rm(gq, b * q_len * d + h * dh, q_len, dh, d),
                    );
                }
                if let Some(gk) = grads[k.0].as_mut().filter(|_| nodes[k.0].needs_grad) {
                    gemm(
                        scale,
                        MatRef::rm(&dp, 0, q_len, k_len, k_len).t(),
                        MatRef::rm(qs, b * q_len * d + h * dh, q_len, dh, d),
                        T::one(),
                        MatMut::rm(gk, b * k_len * d + h * dh, k_len, dh, d),
                    );
                }
            }
        }
    }
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_fwd<T: Float>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// Softmax (or log-softmax) of every slice along `axis`.
pub(crate) fn softmax_along<T: Float>(xs: &[T], shape: &[usize], axis: usize, log: bool) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); xs.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| xs[at(j)]).fold(T::neg_infinity(), T::max);
            let total = (0..len).map(|j| (xs[at(j)] - max).exp()).sum::<T>();
            if log {
                let lse = total.ln();
                for j in 0..len {
                    out[at(j)] = xs[at(j)] - max - lse;
                }
            } else {
                for j in 0..len {
                    out[at(j)] = (xs[at(j)] - max).exp() / total;
                }
            }
        }
    }
    out
}

/// Gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: Vec<Option<Vec<T>>>,
    bindings: Vec<(Var, u64, ParamId)>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of a leaf, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradients of every parameter bound from `store` into the
    /// store's gradient slots.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for &(v, tag, id) in &self.bindings {
            if tag != store.tag() {
                continue;
            }
            if let Some(g) = self.get(v) {
                store.tensor_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

//! Reverse-mode tape.
//!
//! Every op appends one node holding its forward value and whatever it needs
//! for the backward pass. Nodes are only ever appended, so node order is a
//! topological order and `backward` is a single reverse sweep.

use std::cell::{Ref, RefCell};

use super::array::numel;
use super::{attention, Element, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    pub count: usize,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize, b_transposed: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddTrailing { x: Var, b: Var },
    MulTrailing { x: Var, g: Var },
    Scale { x: Var, factor: T },
    Gelu { x: Var },
    Relu { x: Var },
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    BatchNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, probs: Vec<T> },
    CrossEntropy { logits: Var, labels: Vec<usize>, smoothing: T, probs: Vec<T> },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var>, widths: Vec<usize> },
    GatherRows { x: Var, index: Vec<usize> },
    Gather { x: Var, index: Vec<usize> },
    Reshape { x: Var },
    MeanPool { x: Var, group: usize },
    Sum { x: Var },
    Mean { x: Var },
    NormalizeRows { x: Var, norms: Vec<T> },
    FrobeniusNorm { x: Var },
    PairwiseDistance { x: Var },
    GroupMax { x: Var, argmax: Vec<usize> },
    StraightThrough { soft: Var },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recording tape. Confined to one thread (`!Sync` through `RefCell`).
pub struct Graph<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of `v`, or `None` when `v` does not require gradients or
    /// received none.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.get(v)?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.to_vec()).expect("gradient shape"))
    }

    /// Gradient of `v`, zeros if it received none.
    pub fn or_zeros(&self, v: Var) -> Tensor<T> {
        self.tensor(v).unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<(), TensorError> {
    if a != b {
        return Err(TensorError::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn trailing_match(op: &'static str, x: &[usize], b: &[usize]) -> Result<(), TensorError> {
    if b.is_empty() || b.len() > x.len() || !x.ends_with(b) {
        return Err(TensorError::shape(op, format!("{b:?} is not a trailing shape of {x:?}")));
    }
    Ok(())
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        self.value(v).clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Saved attention weights of an attention node, laid out
    /// `[batch, heads, seq, seq]`.
    pub fn attention_weights(&self, v: Var) -> Option<Vec<T>> {
        match &self.nodes.borrow()[v.0].op {
            Op::Attention { probs, .. } => Some(probs.clone()),
            _ => None,
        }
    }

    fn record(&self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs(&op).iter().any(|v| nodes[v.0].requires_grad);
        nodes.push(Node { value, requires_grad, op });
        Ok(Var(nodes.len() - 1))
    }

    // ----- linear algebra -------------------------------------------------

    /// `a[..., k] x b[k, n]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// `a[..., k] x b[n, k]^T`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&self, a: Var, b: Var, b_transposed: bool) -> Result<Var, TensorError> {
        let (value, m, k, n) = {
            let (av, bv) = (self.value(a), self.value(b));
            if av.shape().is_empty() || bv.shape().len() != 2 {
                return Err(TensorError::shape("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
            }
            let k = av.cols();
            let (bk, n) = if b_transposed { (bv.shape()[1], bv.shape()[0]) } else { (bv.shape()[0], bv.shape()[1]) };
            if bk != k {
                return Err(TensorError::shape(
                    "matmul",
                    format!("inner extents differ: {:?} x {:?}", av.shape(), bv.shape()),
                ));
            }
            let m = av.rows();
            let mut out = vec![T::zero(); m * n];
            let (rsb, csb) = if b_transposed { (1, k) } else { (n, 1) };
            T::gemm(m, k, n, T::one(), av.data(), k, 1, bv.data(), rsb, csb, T::zero(), &mut out, n);
            let mut shape = av.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            (Tensor::new(shape, out)?, m, k, n)
        };
        self.record("matmul", value, Op::MatMul { a, b, m, k, n, b_transposed })
    }

    /// `x w + b` with `w: [in, out]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_trailing(y, b),
            None => Ok(y),
        }
    }

    // ----- elementwise ----------------------------------------------------

    fn zip_same(&self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av.shape(), bv.shape())?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        self.record("add", v, Op::Add { a, b })
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.record("sub", v, Op::Sub { a, b })
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.record("mul", v, Op::Mul { a, b })
    }

    /// Adds `b` to every trailing block of `x`; `b.shape` must be a suffix of
    /// `x.shape`. The only broadcasting the tape supports.
    pub fn add_trailing(&self, x: Var, b: Var) -> Result<Var, TensorError> {
        let v = {
            let (xv, bv) = (self.value(x), self.value(b));
            trailing_match("add_trailing", xv.shape(), bv.shape())?;
            let bd = bv.data();
            let data = xv.data().iter().enumerate().map(|(i, &v)| v + bd[i % bd.len()]).collect();
            Tensor::new(xv.shape().to_vec(), data)?
        };
        self.record("add_trailing", v, Op::AddTrailing { x, b })
    }

    /// Multiplies every trailing block of `x` by `g` elementwise.
    pub fn mul_trailing(&self, x: Var, g: Var) -> Result<Var, TensorError> {
        let v = {
            let (xv, gv) = (self.value(x), self.value(g));
            trailing_match("mul_trailing", xv.shape(), gv.shape())?;
            let gd = gv.data();
            let data = xv.data().iter().enumerate().map(|(i, &v)| v * gd[i % gd.len()]).collect();
            Tensor::new(xv.shape().to_vec(), data)?
        };
        self.record("mul_trailing", v, Op::MulTrailing { x, g })
    }

    pub fn scale(&self, x: Var, factor: T) -> Result<Var, TensorError> {
        let v = self.map(x, |v| v * factor);
        self.record("scale", v, Op::Scale { x, factor })
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let xv = self.value(x);
        Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: Var) -> Result<Var, TensorError> {
        let v = self.map(x, gelu_forward);
        self.record("gelu", v, Op::Gelu { x })
    }

    pub fn relu(&self, x: Var) -> Result<Var, TensorError> {
        let v = self.map(x, |v| v.max(T::zero()));
        self.record("relu", v, Op::Relu { x })
    }

    // ----- normalization --------------------------------------------------

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let (v, outer, n, inner) = {
            let xv = self.value(x);
            let shape = xv.shape();
            if axis >= shape.len().max(1) {
                return Err(TensorError::invalid("softmax", format!("axis {axis} for {shape:?}")));
            }
            if !xv.is_finite() {
                return Err(TensorError::NonFinite { op: "softmax" });
            }
            let n = shape.get(axis).copied().unwrap_or(1);
            let outer = numel(&shape[..axis]);
            let inner = if shape.is_empty() { 1 } else { numel(&shape[axis + 1..]) };
            let mut out = xv.data().to_vec();
            softmax_strided(&mut out, outer, n, inner);
            (Tensor::new(shape.to_vec(), out)?, outer, n, inner)
        };
        self.record("softmax", v, Op::Softmax { x, outer, n, inner })
    }

    /// Per-row layer normalization over the trailing axis.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var, TensorError> {
        let (v, xhat, rstd) = {
            let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
            let d = xv.cols();
            if xv.shape().is_empty() || d == 0 {
                return Err(TensorError::invalid("layer_norm", "empty trailing axis".into()));
            }
            same_shape("layer_norm", gv.shape(), &[d])?;
            same_shape("layer_norm", bv.shape(), &[d])?;
            let rows = xv.rows();
            let dn = T::of(d as f64);
            let mut xhat = vec![T::zero(); rows * d];
            let mut rstd = vec![T::zero(); rows];
            let mut out = vec![T::zero(); rows * d];
            for r in 0..rows {
                let row = xv.row(r);
                let mean = row.iter().copied().sum::<T>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                let rs = (var + eps).sqrt().recip();
                rstd[r] = rs;
                for c in 0..d {
                    let h = (row[c] - mean) * rs;
                    xhat[r * d + c] = h;
                    out[r * d + c] = h * gv.data()[c] + bv.data()[c];
                }
            }
            (Tensor::new(xv.shape().to_vec(), out)?, xhat, rstd)
        };
        self.record("layer_norm", v, Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    /// Training-mode batch normalization of `x: [batch, channels]` with batch
    /// statistics. Returns the statistics for running-average updates.
    pub fn batch_norm(&self, x: Var, gain: Var, bias: Var, eps: T) -> Result<(Var, BatchStats<T>), TensorError> {
        let (v, xhat, rstd, stats) = {
            let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
            if xv.shape().len() != 2 {
                return Err(TensorError::shape("batch_norm", format!("{:?}", xv.shape())));
            }
            let (n, d) = (xv.shape()[0], xv.shape()[1]);
            same_shape("batch_norm", gv.shape(), &[d])?;
            same_shape("batch_norm", bv.shape(), &[d])?;
            let nn = T::of(n as f64);
            let data = xv.data();
            let mut mean = vec![T::zero(); d];
            let mut var = vec![T::zero(); d];
            for r in 0..n {
                for c in 0..d {
                    mean[c] = mean[c] + data[r * d + c];
                }
            }
            mean.iter_mut().for_each(|m| *m = *m / nn);
            for r in 0..n {
                for c in 0..d {
                    let e = data[r * d + c] - mean[c];
                    var[c] = var[c] + e * e;
                }
            }
            var.iter_mut().for_each(|v| *v = *v / nn);
            let rstd: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
            let mut xhat = vec![T::zero(); n * d];
            let mut out = vec![T::zero(); n * d];
            for r in 0..n {
                for c in 0..d {
                    let h = (data[r * d + c] - mean[c]) * rstd[c];
                    xhat[r * d + c] = h;
                    out[r * d + c] = h * gv.data()[c] + bv.data()[c];
                }
            }
            let stats = BatchStats { mean, var, count: n };
            (Tensor::new([n, d], out)?, xhat, rstd, stats)
        };
        let y = self.record("batch_norm", v, Op::BatchNorm { x, gain, bias, xhat, rstd })?;
        Ok((y, stats))
    }

    /// Row-wise L2 normalization. Rows with norm below `1e-12` are an error.
    pub fn normalize_rows(&self, x: Var) -> Result<Var, TensorError> {
        let (v, norms) = {
            let xv = self.value(x);
            let d = xv.cols();
            let mut out = xv.data().to_vec();
            let mut norms = Vec::with_capacity(xv.rows());
            for (r, row) in out.chunks_mut(d).enumerate() {
                let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                if !(n.as_f64() >= 1e-12) {
                    return Err(TensorError::invalid("normalize_rows", format!("row {r} has zero norm")));
                }
                row.iter_mut().for_each(|v| *v = *v / n);
                norms.push(n);
            }
            (Tensor::new(xv.shape().to_vec(), out)?, norms)
        };
        self.record("normalize_rows", v, Op::NormalizeRows { x, norms })
    }

    // ----- attention ------------------------------------------------------

    /// Scaled dot-product attention over `[batch, seq, dim]` inputs split into
    /// `heads` heads: `softmax(q k^T / sqrt(dh)) v` per (batch, head).
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, TensorError> {
        let (value, batch, seq, probs) = {
            let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
            same_shape("attention", qv.shape(), kv.shape())?;
            same_shape("attention", qv.shape(), vv.shape())?;
            if qv.shape().len() != 3 {
                return Err(TensorError::shape("attention", format!("need [batch, seq, dim], got {:?}", qv.shape())));
            }
            let (batch, seq, dim) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
            if heads == 0 || dim % heads != 0 {
                return Err(TensorError::invalid("attention", format!("dim {dim} not divisible by {heads} heads")));
            }
            let (out, probs) = attention::forward(qv.data(), kv.data(), vv.data(), batch, seq, dim, heads);
            (Tensor::new(qv.shape().to_vec(), out)?, batch, seq, probs)
        };
        self.record("attention", value, Op::Attention { q, k, v, batch, seq, heads, probs })
    }

    // ----- losses ---------------------------------------------------------

    /// Mean cross-entropy of `logits: [batch, classes]` against smoothed
    /// one-hot targets `(1 - eps) onehot + eps / C`.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize], smoothing: T) -> Result<Var, TensorError> {
        let (v, probs) = {
            let lv = self.value(logits);
            if lv.shape().len() != 2 || lv.shape()[0] != labels.len() {
                return Err(TensorError::shape(
                    "cross_entropy",
                    format!("logits {:?} for {} labels", lv.shape(), labels.len()),
                ));
            }
            if !(smoothing >= T::zero() && smoothing <= T::one()) {
                return Err(TensorError::invalid("cross_entropy", format!("smoothing {smoothing}")));
            }
            let (b, c) = (lv.shape()[0], lv.shape()[1]);
            if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
                return Err(TensorError::invalid("cross_entropy", format!("label {bad} >= {c} classes")));
            }
            if !lv.is_finite() {
                return Err(TensorError::NonFinite { op: "cross_entropy" });
            }
            let mut probs = lv.data().to_vec();
            let mut total = T::zero();
            let cn = T::of(c as f64);
            for (r, &y) in labels.iter().enumerate() {
                let row = lv.row(r);
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
                let mut loss = T::zero();
                for j in 0..c {
                    let logp = row[j] - lse;
                    let q = smoothing / cn + if j == y { T::one() - smoothing } else { T::zero() };
                    loss = loss - q * logp;
                    probs[r * c + j] = logp.exp();
                }
                total = total + loss;
            }
            (Tensor::scalar(total / T::of(b as f64)), probs)
        };
        let labels = labels.to_vec();
        self.record("cross_entropy", v, Op::CrossEntropy { logits, labels, smoothing, probs })
    }

    /// Frobenius norm, a scalar. The gradient at the origin is defined as zero.
    pub fn frobenius_norm(&self, x: Var) -> Result<Var, TensorError> {
        let v = {
            let xv = self.value(x);
            Tensor::scalar(xv.data().iter().map(|&v| v * v).sum::<T>().sqrt())
        };
        self.record("frobenius_norm", v, Op::FrobeniusNorm { x })
    }

    /// Euclidean distances between all row pairs of `x: [n, d]`. The
    /// gradient of a zero distance is defined as zero.
    pub fn pairwise_distance(&self, x: Var) -> Result<Var, TensorError> {
        let v = {
            let xv = self.value(x);
            if xv.shape().len() != 2 {
                return Err(TensorError::shape("pairwise_distance", format!("{:?}", xv.shape())));
            }
            let n = xv.shape()[0];
            let mut out = vec![T::zero(); n * n];
            for i in 0..n {
                for j in (i + 1)..n {
                    let d = xv.row(i).iter().zip(xv.row(j)).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>().sqrt();
                    out[i * n + j] = d;
                    out[j * n + i] = d;
                }
            }
            Tensor::new([n, n], out)?
        };
        self.record("pairwise_distance", v, Op::PairwiseDistance { x })
    }

    /// Max over consecutive column groups: `[rows, c * group] -> [rows, c]`.
    /// Ties resolve to the lowest index.
    pub fn group_max(&self, x: Var, group: usize) -> Result<Var, TensorError> {
        let (v, argmax) = {
            let xv = self.value(x);
            let cols = xv.cols();
            if xv.shape().len() != 2 || group == 0 || cols % group != 0 {
                return Err(TensorError::shape("group_max", format!("{:?} by {group}", xv.shape())));
            }
            let rows = xv.rows();
            let out_cols = cols / group;
            let mut out = Vec::with_capacity(rows * out_cols);
            let mut argmax = Vec::with_capacity(rows * out_cols);
            for r in 0..rows {
                for (c, ch) in xv.row(r).chunks(group).enumerate() {
                    let (best, _) = argmax_first(ch);
                    out.push(ch[best]);
                    argmax.push(r * cols + c * group + best);
                }
            }
            (Tensor::new([rows, out_cols], out)?, argmax)
        };
        self.record("group_max", v, Op::GroupMax { x, argmax })
    }

    // ----- structural -----------------------------------------------------

    /// Stacks tensors along axis 0; trailing shapes must agree.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var, TensorError> {
        let v = {
            let first = parts.first().ok_or_else(|| TensorError::invalid("concat_rows", "no inputs".into()))?;
            let tail = self.value(*first).shape().get(1..).unwrap_or(&[]).to_vec();
            let mut lead = 0;
            let mut data = Vec::new();
            for &p in parts {
                let pv = self.value(p);
                if pv.shape().is_empty() || pv.shape()[1..] != tail[..] {
                    return Err(TensorError::shape("concat_rows", format!("{:?} vs tail {tail:?}", pv.shape())));
                }
                lead += pv.shape()[0];
                data.extend_from_slice(pv.data());
            }
            let mut shape = vec![lead];
            shape.extend(tail);
            Tensor::new(shape, data)?
        };
        self.record("concat_rows", v, Op::ConcatRows { parts: parts.to_vec() })
    }

    /// Joins 2-D tensors with equal row counts side by side.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var, TensorError> {
        let (v, widths) = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let rows = vals.first().map(|v| v.shape().first().copied().unwrap_or(0));
            let rows = rows.ok_or_else(|| TensorError::invalid("concat_cols", "no inputs".into()))?;
            for pv in &vals {
                if pv.shape().len() != 2 || pv.shape()[0] != rows {
                    return Err(TensorError::shape("concat_cols", format!("{:?}, rows {rows}", pv.shape())));
                }
            }
            let widths: Vec<usize> = vals.iter().map(|v| v.shape()[1]).collect();
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for pv in &vals {
                    data.extend_from_slice(pv.row(r));
                }
            }
            (Tensor::new([rows, total], data)?, widths)
        };
        self.record("concat_cols", v, Op::ConcatCols { parts: parts.to_vec(), widths })
    }

    /// Selects rows (leading axes flattened) by index: `[rows, d] -> [len, d]`.
    pub fn gather_rows(&self, x: Var, index: &[usize]) -> Result<Var, TensorError> {
        let v = {
            let xv = self.value(x);
            let (rows, d) = (xv.rows(), xv.cols());
            if index.is_empty() {
                return Err(TensorError::invalid("gather_rows", "empty index".into()));
            }
            let mut data = Vec::with_capacity(index.len() * d);
            for &r in index {
                if r >= rows {
                    return Err(TensorError::invalid("gather_rows", format!("row {r} >= {rows}")));
                }
                data.extend_from_slice(xv.row(r));
            }
            Tensor::new([index.len(), d], data)?
        };
        self.record("gather_rows", v, Op::GatherRows { x, index: index.to_vec() })
    }

    /// Selects flat elements of `x` into a tensor of `shape`.
    pub fn gather(&self, x: Var, index: &[usize], shape: &[usize]) -> Result<Var, TensorError> {
        let v = {
            let xv = self.value(x);
            let mut data = Vec::with_capacity(index.len());
            for &i in index {
                let e = xv
                    .data()
                    .get(i)
                    .ok_or_else(|| TensorError::invalid("gather", format!("element {i} >= {}", xv.len())))?;
                data.push(*e);
            }
            Tensor::new(shape.to_vec(), data)?
        };
        self.record("gather", v, Op::Gather { x, index: index.to_vec() })
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let v = self.tensor(x).reshape(shape.to_vec())?;
        self.record("reshape", v, Op::Reshape { x })
    }

    /// Means over consecutive groups of `group` rows: `[n * group, d] -> [n, d]`.
    pub fn mean_pool(&self, x: Var, group: usize) -> Result<Var, TensorError> {
        let v = {
            let xv = self.value(x);
            let (rows, d) = (xv.rows(), xv.cols());
            if group == 0 || rows % group != 0 {
                return Err(TensorError::shape("mean_pool", format!("{rows} rows by {group}")));
            }
            let inv = T::of(group as f64).recip();
            let mut out = vec![T::zero(); rows / group * d];
            for r in 0..rows {
                let o = r / group * d;
                for (c, &v) in xv.row(r).iter().enumerate() {
                    out[o + c] = out[o + c] + v;
                }
            }
            out.iter_mut().for_each(|v| *v = *v * inv);
            Tensor::new([rows / group, d], out)?
        };
        self.record("mean_pool", v, Op::MeanPool { x, group })
    }

    pub fn sum(&self, x: Var) -> Result<Var, TensorError> {
        let v = Tensor::scalar(self.value(x).data().iter().copied().sum());
        self.record("sum", v, Op::Sum { x })
    }

    pub fn mean(&self, x: Var) -> Result<Var, TensorError> {
        let v = {
            let xv = self.value(x);
            Tensor::scalar(xv.data().iter().copied().sum::<T>() / T::of(xv.len() as f64))
        };
        self.record("mean", v, Op::Mean { x })
    }

    /// Forward value is `hard`; the gradient passes to `soft` unchanged.
    pub fn straight_through(&self, soft: Var, hard: Tensor<T>) -> Result<Var, TensorError> {
        same_shape("straight_through", self.value(soft).shape(), hard.shape())?;
        self.record("straight_through", hard, Op::StraightThrough { soft })
    }

    // ----- backward -------------------------------------------------------

    /// Reverse sweep from a one-element `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>, TensorError> {
        let nodes = self.nodes.borrow();
        if nodes[output.0].value.len() != 1 {
            return Err(TensorError::shape(
                "backward",
                format!("output must hold one element, has shape {:?}", nodes[output.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![T::one()]);
        for i in (0..=output.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if nodes[i].requires_grad {
                backward_node(&nodes, i, &gy, &mut grads);
            }
            grads[i] = Some(gy);
        }
        let shapes = nodes[..=output.0].iter().map(|n| n.value.shape().to_vec()).collect();
        for (g, n) in grads.iter_mut().zip(nodes.iter()) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

fn inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
        Op::AddTrailing { x, b } => vec![*x, *b],
        Op::MulTrailing { x, g } => vec![*x, *g],
        Op::Scale { x, .. }
        | Op::Gelu { x }
        | Op::Relu { x }
        | Op::Softmax { x, .. }
        | Op::GatherRows { x, .. }
        | Op::Gather { x, .. }
        | Op::Reshape { x }
        | Op::MeanPool { x, .. }
        | Op::Sum { x }
        | Op::Mean { x }
        | Op::NormalizeRows { x, .. }
        | Op::FrobeniusNorm { x }
        | Op::PairwiseDistance { x }
        | Op::GroupMax { x, .. } => vec![*x],
        Op::LayerNorm { x, gain, bias, .. } | Op::BatchNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::ConcatRows { parts } | Op::ConcatCols { parts, .. } => parts.clone(),
        Op::StraightThrough { soft } => vec![*soft],
    }
}

/// Index of the first maximum (lowest index wins ties) and its value.
pub(crate) fn argmax_first<T: Element>(xs: &[T]) -> (usize, T) {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    (best, xs[best])
}

pub(crate) fn softmax_strided<T: Element>(data: &mut [T], outer: usize, n: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let mx = (0..n).map(|j| data[at(j)]).fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for j in 0..n {
                let e = (data[at(j)] - mx).exp();
                data[at(j)] = e;
                s = s + e;
            }
            for j in 0..n {
                data[at(j)] = data[at(j)] / s;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu_forward<T: Element>(x: T) -> T {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

fn slot<'a, T: Element>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn backward_node<T: Element>(nodes: &[Node<T>], i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n, b_transposed } => {
            let (m, k, n) = (*m, *k, *n);
            if let Some(ga) = slot(grads, nodes, *a) {
                // dA = dC B_eff^T
                let (rs, cs) = if *b_transposed { (k, 1) } else { (1, n) };
                T::gemm(m, n, k, T::one(), gy, n, 1, val(*b).data(), rs, cs, T::one(), ga, k);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                if *b_transposed {
                    // d(b) [n, k] = dC^T A
                    T::gemm(n, m, k, T::one(), gy, 1, n, val(*a).data(), k, 1, T::one(), gb, k);
                } else {
                    // d(b) [k, n] = A^T dC
                    T::gemm(k, m, n, T::one(), val(*a).data(), 1, k, gy, n, 1, T::one(), gb, n);
                }
            }
        }
        Op::Add { a, b } => {
            for (v, sign) in [(*a, T::one()), (*b, T::one())] {
                if let Some(g) = slot(grads, nodes, v) {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g + sign * d);
                }
            }
        }
        Op::Sub { a, b } => {
            for (v, sign) in [(*a, T::one()), (*b, -T::one())] {
                if let Some(g) = slot(grads, nodes, v) {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g + sign * d);
                }
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(g) = slot(grads, nodes, *a) {
                for j in 0..g.len() {
                    g[j] = g[j] + gy[j] * bv[j];
                }
            }
            if let Some(g) = slot(grads, nodes, *b) {
                for j in 0..g.len() {
                    g[j] = g[j] + gy[j] * av[j];
                }
            }
        }
        Op::AddTrailing { x, b } => {
            if let Some(g) = slot(grads, nodes, *x) {
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g + d);
            }
            if let Some(g) = slot(grads, nodes, *b) {
                let l = g.len();
                for (j, &d) in gy.iter().enumerate() {
                    g[j % l] = g[j % l] + d;
                }
            }
        }
        Op::MulTrailing { x, g: gain } => {
            let (xv, gv) = (val(*x).data(), val(*gain).data());
            let l = gv.len();
            if let Some(g) = slot(grads, nodes, *x) {
                for j in 0..g.len() {
                    g[j] = g[j] + gy[j] * gv[j % l];
                }
            }
            if let Some(g) = slot(grads, nodes, *gain) {
                for (j, &d) in gy.iter().enumerate() {
                    g[j % l] = g[j % l] + d * xv[j];
                }
            }
        }
        Op::Scale { x, factor } => {
            if let Some(g) = slot(grads, nodes, *x) {
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g + d * *factor);
            }
        }
        Op::Gelu { x } => {
            let xv = val(*x).data();
            if let Some(g) = slot(grads, nodes, *x) {
                for j in 0..g.len() {
                    g[j] = g[j] + gy[j] * gelu_grad(xv[j]);
                }
            }
        }
        Op::Relu { x } => {
            let xv = val(*x).data();
            if let Some(g) = slot(grads, nodes, *x) {
                for j in 0..g.len() {
                    if xv[j] > T::zero() {
                        g[j] = g[j] + gy[j];
                    }
                }
            }
        }
        Op::Softmax { x, outer, n, inner } => {
            let y = out.data();
            if let Some(g) = slot(grads, nodes, *x) {
                for o in 0..*outer {
                    for ii in 0..*inner {
                        let at = |j: usize| o * n * inner + j * inner + ii;
                        let dot = (0..*n).map(|j| gy[at(j)] * y[at(j)]).sum::<T>();
                        for j in 0..*n {
                            g[at(j)] = g[at(j)] + y[at(j)] * (gy[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let gv = val(*gain).data();
            let d = gv.len();
            let rows = rstd.len();
            if let Some(g) = slot(grads, nodes, *gain) {
                for (j, &dy) in gy.iter().enumerate() {
                    g[j % d] = g[j % d] + dy * xhat[j];
                }
            }
            if let Some(g) = slot(grads, nodes, *bias) {
                for (j, &dy) in gy.iter().enumerate() {
                    g[j % d] = g[j % d] + dy;
                }
            }
            if let Some(g) = slot(grads, nodes, *x) {
                let dn = T::of(d as f64);
                for r in 0..rows {
                    let o = r * d;
                    let dxhat: Vec<T> = (0..d).map(|c| gy[o + c] * gv[c]).collect();
                    let s1 = dxhat.iter().copied().sum::<T>();
                    let s2 = (0..d).map(|c| dxhat[c] * xhat[o + c]).sum::<T>();
                    for c in 0..d {
                        g[o + c] = g[o + c] + rstd[r] / dn * (dn * dxhat[c] - s1 - xhat[o + c] * s2);
                    }
                }
            }
        }
        Op::BatchNorm { x, gain, bias, xhat, rstd } => {
            let gv = val(*gain).data();
            let d = gv.len();
            let n = xhat.len() / d;
            if let Some(g) = slot(grads, nodes, *gain) {
                for (j, &dy) in gy.iter().enumerate() {
                    g[j % d] = g[j % d] + dy * xhat[j];
                }
            }
            if let Some(g) = slot(grads, nodes, *bias) {
                for (j, &dy) in gy.iter().enumerate() {
                    g[j % d] = g[j % d] + dy;
                }
            }
            if let Some(g) = slot(grads, nodes, *x) {
                let nn = T::of(n as f64);
                for c in 0..d {
                    let dxhat = |r: usize| gy[r * d + c] * gv[c];
                    let s1 = (0..n).map(dxhat).sum::<T>();
                    let s2 = (0..n).map(|r| dxhat(r) * xhat[r * d + c]).sum::<T>();
                    for r in 0..n {
                        let j = r * d + c;
                        g[j] = g[j] + rstd[c] / nn * (nn * dxhat(r) - s1 - xhat[j] * s2);
                    }
                }
            }
        }
        Op::NormalizeRows { x, norms } => {
            let y = out.data();
            let d = out.cols();
            if let Some(g) = slot(grads, nodes, *x) {
                for (r, &nrm) in norms.iter().enumerate() {
                    let o = r * d;
                    let dot = (0..d).map(|c| y[o + c] * gy[o + c]).sum::<T>();
                    for c in 0..d {
                        g[o + c] = g[o + c] + (gy[o + c] - y[o + c] * dot) / nrm;
                    }
                }
            }
        }
        Op::Attention { q, k, v, batch, seq, heads, probs } => {
            let dim = val(*q).cols();
            let mut dq = vec![T::zero(); val(*q).len()];
            let mut dk = vec![T::zero(); dq.len()];
            let mut dv = vec![T::zero(); dq.len()];
            attention::backward(
                val(*q).data(),
                val(*k).data(),
                val(*v).data(),
                probs,
                gy,
                (*batch, *seq, dim, *heads),
                (&mut dq, &mut dk, &mut dv),
            );
            for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                if let Some(g) = slot(grads, nodes, var) {
                    g.iter_mut().zip(&d).for_each(|(g, &d)| *g = *g + d);
                }
            }
        }
        Op::CrossEntropy { logits, labels, smoothing, probs } => {
            let c = val(*logits).cols();
            let b = labels.len();
            let scale = gy[0] / T::of(b as f64);
            let cn = T::of(c as f64);
            if let Some(g) = slot(grads, nodes, *logits) {
                for (r, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let q = *smoothing / cn + if j == y { T::one() - *smoothing } else { T::zero() };
                        g[r * c + j] = g[r * c + j] + scale * (probs[r * c + j] - q);
                    }
                }
            }
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).len();
                if let Some(g) = slot(grads, nodes, p) {
                    g.iter_mut().zip(&gy[offset..offset + len]).for_each(|(g, &d)| *g = *g + d);
                }
                offset += len;
            }
        }
        Op::ConcatCols { parts, widths } => {
            let total: usize = widths.iter().sum();
            let rows = gy.len() / total;
            let mut col = 0;
            for (&p, &w) in parts.iter().zip(widths) {
                if let Some(g) = slot(grads, nodes, p) {
                    for r in 0..rows {
                        for c in 0..w {
                            g[r * w + c] = g[r * w + c] + gy[r * total + col + c];
                        }
                    }
                }
                col += w;
            }
        }
        Op::GatherRows { x, index } => {
            let d = out.cols();
            if let Some(g) = slot(grads, nodes, *x) {
                for (o, &r) in index.iter().enumerate() {
                    for c in 0..d {
                        g[r * d + c] = g[r * d + c] + gy[o * d + c];
                    }
                }
            }
        }
        Op::Gather { x, index } => {
            if let Some(g) = slot(grads, nodes, *x) {
                for (o, &e) in index.iter().enumerate() {
                    g[e] = g[e] + gy[o];
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(g) = slot(grads, nodes, *x) {
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g + d);
            }
        }
        Op::MeanPool { x, group } => {
            let d = out.cols();
            let inv = T::of(*group as f64).recip();
            if let Some(g) = slot(grads, nodes, *x) {
                for (j, g) in g.iter_mut().enumerate() {
                    let (r, c) = (j / d, j % d);
                    *g = *g + gy[r / group * d + c] * inv;
                }
            }
        }
        Op::Sum { x } => {
            if let Some(g) = slot(grads, nodes, *x) {
                g.iter_mut().for_each(|g| *g = *g + gy[0]);
            }
        }
        Op::Mean { x } => {
            if let Some(g) = slot(grads, nodes, *x) {
                let s = gy[0] / T::of(g.len() as f64);
                g.iter_mut().for_each(|g| *g = *g + s);
            }
        }
        Op::FrobeniusNorm { x } => {
            let nrm = out.item();
            let xv = val(*x).data();
            if nrm > T::zero() {
                if let Some(g) = slot(grads, nodes, *x) {
                    for j in 0..g.len() {
                        g[j] = g[j] + gy[0] * xv[j] / nrm;
                    }
                }
            }
        }
        Op::PairwiseDistance { x } => {
            let xv = val(*x);
            let (n, d) = (xv.shape()[0], xv.shape()[1]);
            let dist = out.data();
            if let Some(g) = slot(grads, nodes, *x) {
                for i in 0..n {
                    for j in 0..n {
                        let dij = dist[i * n + j];
                        if i == j || dij <= T::zero() {
                            continue;
                        }
                        // D is symmetric; each (i, j) entry contributes to x_i and x_j.
                        let w = gy[i * n + j] / dij;
                        for c in 0..d {
                            let diff = xv.data()[i * d + c] - xv.data()[j * d + c];
                            g[i * d + c] = g[i * d + c] + w * diff;
                            g[j * d + c] = g[j * d + c] - w * diff;
                        }
                    }
                }
            }
        }
        Op::GroupMax { x, argmax, .. } => {
            if let Some(g) = slot(grads, nodes, *x) {
                for (o, &e) in argmax.iter().enumerate() {
                    g[e] = g[e] + gy[o];
                }
            }
        }
        Op::StraightThrough { soft } => {
            if let Some(g) = slot(grads, nodes, *soft) {
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g + d);
            }
        }
    }
}

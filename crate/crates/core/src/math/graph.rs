//! Define-by-run computation record with reverse-mode differentiation.
//!
//! Every op appends one node; node order is execution order, so the
//! backward pass is a single reverse sweep. Shape contracts are strict:
//! no implicit broadcasting except where an op says so (`add_bias`).

use super::params::{ParamId, ParamSet};
use super::tensor::{axis_split, Tensor};
use crate::error::{invalid, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, axis: usize, inv_std: Vec<f64> },
    Concat { parts: Vec<Var>, axis: usize },
    Gather { x: Var, indices: Vec<usize> },
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    MeanAxis { x: Var, axis: usize },
    Mse(Var, Var),
    RowNorm(Var),
    Min { x: Var, argmin: usize },
    Focal { x: Var, dloss: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::gradients`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Clamp applied to predictions entering the focal loss.
pub const FOCAL_EPS: f64 = 1e-7;

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape { op, left: a.shape().to_vec(), right: b.shape().to_vec() }
}

fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: bounds checked above; strides describe the row-major buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-trainable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input that gradients should be computed for (no parameter link).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.push(params.value(id).clone(), Op::Param(id), true)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        dgemm(m, k, n, ta.data(), (k as isize, 1), tb.data(), (n as isize, 1), &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// Elementwise sum; shapes must be identical.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    /// Elementwise product; shapes must be identical.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// `x[..., n] + b[n]`, the bias repeated over every leading index.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = tb.numel();
        if tx.shape().last() != Some(&n) || tb.shape().len() != 1 {
            return Err(shape_err("add_bias", tx, tb));
        }
        let bias = tb.data();
        let data = tx.data().chunks(n).flat_map(|row| row.iter().zip(bias).map(|(v, c)| v + c)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(t, Op::AddBias(x, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v * c).collect()).unwrap();
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, c), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v.max(0.0)).collect()).unwrap();
        let ng = self.ng(x);
        self.push(t, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| logistic(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).unwrap();
        let ng = self.ng(x);
        self.push(t, Op::Sigmoid(x), ng)
    }

    /// Softmax along `axis` (any rank).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.shape().len() {
            return Err(invalid("softmax", format!("axis {axis} out of range for {:?}", tx.shape())));
        }
        let (outer, n, inner) = axis_split(tx.shape(), axis);
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[idx(j)] /= z;
                }
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Softmax { x, axis }, ng))
    }

    /// Zero-mean, unit-variance normalization along `axis`, no affine terms.
    pub fn layernorm(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.layernorm_eps(x, axis, 1e-9)
    }

    pub fn layernorm_eps(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.shape().len() {
            return Err(invalid("layernorm", format!("axis {axis} out of range for {:?}", tx.shape())));
        }
        let (outer, n, inner) = axis_split(tx.shape(), axis);
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mean = (0..n).map(|j| src[idx(j)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|j| (src[idx(j)] - mean).powi(2)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + eps).sqrt();
                for j in 0..n {
                    out[idx(j)] = (src[idx(j)] - mean) * is;
                }
                inv_std.push(is);
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::LayerNorm { x, axis, inv_std }, ng))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let same_rest = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !same_rest {
                return Err(Error::Shape { op: "concat", left: base.clone(), right: s.to_vec() });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let w = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, ng))
    }

    /// Selects slices along axis 0; indices may repeat.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().is_empty() {
            return Err(invalid("gather", "cannot gather from a scalar"));
        }
        let rows = tx.shape()[0];
        let w = tx.cols();
        let mut out = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            if i >= rows {
                return Err(invalid("gather", format!("index {i} out of range for {:?}", tx.shape())));
            }
            out.extend_from_slice(&tx.data()[i * w..(i + 1) * w]);
        }
        let mut shape = tx.shape().to_vec();
        shape[0] = indices.len();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gather { x, indices: indices.to_vec() }, ng))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(invalid("transpose", format!("expected rank 2, got {:?}", tx.shape())));
        }
        let (m, n) = (tx.shape()[0], tx.shape()[1]);
        let src = tx.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean along `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.shape().len() {
            return Err(invalid("mean_axis", format!("axis {axis} out of range for {:?}", tx.shape())));
        }
        let (outer, n, inner) = axis_split(tx.shape(), axis);
        let src = tx.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * n + j) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let mut shape = tx.shape().to_vec();
        shape.remove(axis);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MeanAxis { x, axis }, ng))
    }

    /// Mean squared error between equal-shaped tensors, as a scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(shape_err("mse", tp, tt));
        }
        let n = tp.numel().max(1) as f64;
        let s = tp.data().iter().zip(tt.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
        let ng = self.ng(pred) || self.ng(target);
        Ok(self.push(Tensor::scalar(s), Op::Mse(pred, target), ng))
    }

    /// Euclidean norm of each row: `[m, n] -> [m]`.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(invalid("row_norm", format!("expected rank 2, got {:?}", tx.shape())));
        }
        let out: Vec<f64> = tx.data().chunks(tx.shape()[1].max(1)).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let out = if tx.shape()[1] == 0 { vec![0.0; tx.shape()[0]] } else { out };
        let ng = self.ng(x);
        Ok(self.push(Tensor::vector(out), Op::RowNorm(x), ng))
    }

    /// Smallest element, as a scalar; ties resolve to the first index.
    pub fn min(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.numel() == 0 {
            return Err(invalid("min", "empty tensor"));
        }
        let mut argmin = 0;
        for (i, v) in tx.data().iter().enumerate() {
            if *v < tx.data()[argmin] {
                argmin = i;
            }
        }
        let v = tx.data()[argmin];
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(v), Op::Min { x, argmin }, ng))
    }

    /// Pixel-wise focal loss of predictions `pred` against targets.
    ///
    /// Cells whose target is exactly 1 use the `log(p)` branch; all others
    /// use the penalty-reduced `(1 - y)^4 log(1 - p)` branch. Predictions
    /// are clamped to `[FOCAL_EPS, 1 - FOCAL_EPS]`.
    pub fn focal_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let tp = self.value(pred);
        if tp.shape() != target.shape() {
            return Err(shape_err("focal_loss", tp, target));
        }
        if let Some(bad) = tp.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid("focal_loss", format!("prediction {bad} outside [0, 1]")));
        }
        let n = tp.numel().max(1) as f64;
        let mut loss = 0.0;
        let mut dloss = Vec::with_capacity(tp.numel());
        for (&p_raw, &y) in tp.data().iter().zip(target.data()) {
            let p = p_raw.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
            let clamped = p != p_raw;
            let (term, dterm) = focal_term(y, p);
            loss -= term;
            dloss.push(if clamped { 0.0 } else { -dterm / n });
        }
        let ng = self.ng(pred);
        Ok(self.push(Tensor::scalar(loss / n), Op::Focal { x: pred, dloss }, ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Reverse sweep from `loss`, accumulating into every reachable parameter.
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                params.accumulate_grad(*id, g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                // dA = G B^T, dB = A^T G
                acc(*a, &|s| dgemm(m, n, k, g, (n as isize, 1), tb.data(), (1, n as isize), s, 1.0));
                acc(*b, &|s| dgemm(k, m, n, ta.data(), (1, k as isize), g, (n as isize, 1), s, 1.0));
            }
            Op::Add(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(d, v)| *d -= v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|s| s.iter_mut().zip(g).zip(tb).for_each(|((d, v), y)| *d += v * y));
                acc(*b, &|s| s.iter_mut().zip(g).zip(ta).for_each(|((d, v), x)| *d += v * x));
            }
            Op::AddBias(x, b) => {
                acc(*x, &|s| add_into(s, g));
                let n = self.value(*b).numel();
                acc(*b, &|s| {
                    for row in g.chunks(n) {
                        add_into(s, row);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &|s| s.iter_mut().zip(g).for_each(|(d, v)| *d += v * c)),
            Op::Relu(x) => {
                let out = node.value.data();
                acc(*x, &|s| {
                    s.iter_mut().zip(g).zip(out).for_each(|((d, v), y)| {
                        if *y > 0.0 {
                            *d += v
                        }
                    })
                });
            }
            Op::Sigmoid(x) => {
                let out = node.value.data();
                acc(*x, &|s| s.iter_mut().zip(g).zip(out).for_each(|((d, v), y)| *d += v * y * (1.0 - y)));
            }
            Op::Softmax { x, axis } => {
                let out = node.value.data();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                acc(*x, &|s| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + ii;
                            let dot: f64 = (0..n).map(|j| g[idx(j)] * out[idx(j)]).sum();
                            for j in 0..n {
                                s[idx(j)] += out[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, axis, inv_std } => {
                let out = node.value.data();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                acc(*x, &|s| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + ii;
                            let is = inv_std[o * inner + ii];
                            let mg: f64 = (0..n).map(|j| g[idx(j)]).sum::<f64>() / n as f64;
                            let mgy: f64 = (0..n).map(|j| g[idx(j)] * out[idx(j)]).sum::<f64>() / n as f64;
                            for j in 0..n {
                                s[idx(j)] += is * (g[idx(j)] - mg - out[idx(j)] * mgy);
                            }
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).shape()[*axis] * inner;
                    acc(*p, &|s| {
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset..o * total * inner + offset + w];
                            add_into(&mut s[o * w..(o + 1) * w], src);
                        }
                    });
                    offset += w;
                }
            }
            Op::Gather { x, indices } => {
                let w = self.value(*x).cols();
                acc(*x, &|s| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut s[i * w..(i + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::Transpose(x) => {
                let (n, m) = (node.value.shape()[0], node.value.shape()[1]);
                acc(*x, &|s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &|s| add_into(s, g)),
            Op::Sum(x) => acc(*x, &|s| s.iter_mut().for_each(|d| *d += g[0])),
            Op::MeanAxis { x, axis } => {
                let (outer, n, inner) = axis_split(self.value(*x).shape(), *axis);
                acc(*x, &|s| {
                    for o in 0..outer {
                        for j in 0..n {
                            for ii in 0..inner {
                                s[(o * n + j) * inner + ii] += g[o * inner + ii] / n as f64;
                            }
                        }
                    }
                });
            }
            Op::Mse(p, t) => {
                let (tp, tt) = (self.value(*p).data(), self.value(*t).data());
                let c = 2.0 * g[0] / tp.len().max(1) as f64;
                acc(*p, &|s| s.iter_mut().zip(tp).zip(tt).for_each(|((d, a), b)| *d += c * (a - b)));
                acc(*t, &|s| s.iter_mut().zip(tp).zip(tt).for_each(|((d, a), b)| *d -= c * (a - b)));
            }
            Op::RowNorm(x) => {
                let tx = self.value(*x);
                let w = tx.shape()[1];
                let norms = node.value.data();
                acc(*x, &|s| {
                    for (r, &nr) in norms.iter().enumerate() {
                        if nr > 0.0 {
                            for j in 0..w {
                                s[r * w + j] += g[r] * tx.data()[r * w + j] / nr;
                            }
                        }
                    }
                });
            }
            Op::Min { x, argmin } => acc(*x, &|s| s[*argmin] += g[0]),
            Op::Focal { x, dloss } => acc(*x, &|s| s.iter_mut().zip(dloss).for_each(|(d, v)| *d += g[0] * v)),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Per-cell focal term `(y - p)^2 f(y, p)` and its derivative in `p`.
/// The loss contribution is the negated term.
pub fn focal_term(y: f64, p: f64) -> (f64, f64) {
    if y == 1.0 {
        let q = 1.0 - p;
        (q * q * p.ln(), -2.0 * q * p.ln() + q * q / p)
    } else {
        let w = (1.0 - y).powi(4);
        let d = y - p;
        let l = (1.0 - p).ln();
        (w * d * d * l, w * (-2.0 * d * l - d * d / (1.0 - p)))
    }
}

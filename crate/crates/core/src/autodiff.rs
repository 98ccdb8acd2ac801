//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] owns every intermediate value. Operations append a node and
//! return its [`Var`] handle; because inputs always precede outputs on the
//! tape, a single reverse sweep over node indices is a valid topological
//! order and gradient accumulation order is fixed for a fixed graph.
//!
//! ```
//! use ftn_core::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let w = g.param(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
//! let s = g.square(w);
//! let loss = g.sum(s);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRowBias { x: Var, bias: Var },
    MatMul(Var, Var),
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Conv2d { x: Var, w: Var, stride: usize, padding: usize },
    Relu(Var),
    Softmax { x: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    MeanAxis { x: Var, axis: usize },
    Square(Var),
    CpReconstruct { modes: [Var; 3], scale: T },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, inv_std: Vec<T>, train: bool },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor<T> },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel batch statistics produced by a train-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// A recorded computation.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients from one [`Graph::backward`] sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` for nodes that do not require gradients or that the root does
    /// not depend on.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never accumulates gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).scale(s);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, s), rg)
    }

    /// `x [M,N] + bias [N]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = kernels::dims2(self.value(x), "add_row_bias")?;
        if self.value(bias).shape() != [n] {
            return Err(shape_err(
                "add_row_bias",
                format!("bias {:?} does not match {n} columns", self.value(bias).shape()),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let v = Tensor::from_vec(&[m, n], data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(v, Op::AddRowBias { x, bias }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let v = kernels::permute(self.value(x), axes)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Permute { x, axes: axes.to_vec() }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        kernels::dims2(self.value(x), "transpose")?;
        self.permute(x, &[1, 0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = kernels::narrow(self.value(x), axis, start, len)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Narrow { x, axis, start }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|&x| self.value(x)).collect();
        let v = kernels::concat(&vals, axis)?;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(v, Op::Concat { xs: xs.to_vec(), axis }, rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let v = kernels::conv2d(self.value(x), self.value(w), stride, padding)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(v, Op::Conv2d { x, w, stride, padding }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // written so that NaN propagates
        let v = self.value(x).map(|a| if a <= T::zero() { T::zero() } else { a });
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = kernels::softmax(self.value(x), axis)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Softmax { x, axis }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / T::lit(t.len() as f64));
        let rg = self.rg(x);
        self.push(v, Op::Mean(x), rg)
    }

    /// Mean along `axis`, keeping the axis with size one.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = kernels::mean_axis(self.value(x), axis)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::MeanAxis { x, axis }, rg))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * a);
        let rg = self.rg(x);
        self.push(v, Op::Square(x), rg)
    }

    /// Sum of `R` scaled rank-1 tensors from factor matrices `[R, D_m]`.
    pub fn cp_reconstruct(&mut self, modes: [Var; 3], scale: T) -> Result<Var> {
        let v = kernels::cp_reconstruct(
            self.value(modes[0]),
            self.value(modes[1]),
            self.value(modes[2]),
            scale,
        )?;
        let rg = modes.iter().any(|&m| self.rg(m));
        Ok(self.push(v, Op::CpReconstruct { modes, scale }, rg))
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let s = self.value(x).shape();
        if s.len() != 4 {
            return Err(shape_err("batchnorm", format!("expected [N,C,H,W], got {s:?}")));
        }
        let c = s[1];
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).shape() != [c] {
                return Err(shape_err(
                    "batchnorm",
                    format!(
                        "channel mismatch: input has {c} channels, {name} has shape {:?}",
                        self.value(p).shape()
                    ),
                ));
            }
        }
        Ok(c)
    }

    /// Batch norm with statistics of the current batch. Returns the batch
    /// moments so the caller can update running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        self.check_bn(x, gamma, beta)?;
        let s = self.value(x).shape();
        if s[0] * s[2] * s[3] < 2 {
            return Err(Error::InvalidArgument(format!(
                "train-mode batch norm needs at least 2 values per channel, got shape {s:?}"
            )));
        }
        let (mean, var) = kernels::channel_moments(self.value(x))?;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let stats = BatchStats { mean, var };
        let out = self.bn_apply(x, gamma, beta, &stats.mean, inv_std, true);
        Ok((out, stats))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let c = self.check_bn(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err(
                "batchnorm",
                format!("running stats have {} / {} entries for {c} channels", mean.len(), var.len()),
            ));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        Ok(self.bn_apply(x, gamma, beta, mean, inv_std, false))
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: Vec<T>,
        train: bool,
    ) -> Var {
        let xhat = kernels::channel_normalize(self.value(x), mean, &inv_std);
        let out = kernels::channel_affine(&xhat, self.value(gamma).data(), self.value(beta).data());
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, rg)
    }

    /// Mean cross-entropy of `logits [N, K]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = kernels::dims2(self.value(logits), "softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
        let probs = kernels::softmax(self.value(logits), 1)?;
        let z = self.value(logits).data();
        let mut loss = T::zero();
        for (row, &y) in labels.iter().enumerate() {
            let zr = &z[row * k..(row + 1) * k];
            let max = zr.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = zr.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - zr[y];
        }
        let v = Tensor::scalar(loss / T::lit(n as f64));
        let rg = self.rg(logits);
        Ok(self.push(v, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_val = &self.nodes[root.0].value;
        if !root_val.is_scalar() {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        if !self.rg(root) {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::ones(root_val.shape()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.map(|x| -x))?;
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let ga = g.zip_map(self.value(*b), "mul", |x, y| x * y)?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.rg(*b) {
                    let gb = g.zip_map(self.value(*a), "mul", |x, y| x * y)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s))?;
            }
            Op::AddRowBias { x, bias } => {
                self.accumulate(grads, *x, g.clone())?;
                if self.rg(*bias) {
                    let n = g.shape()[1];
                    let mut gb = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::from_vec(&[n], gb)?)?;
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    kernels::gemm_bt(m, n, k, g.data(), bv.data(), &mut ga);
                    self.accumulate(grads, *a, Tensor::from_vec(&[m, k], ga)?)?;
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    kernels::gemm_at(k, m, n, av.data(), g.data(), &mut gb);
                    self.accumulate(grads, *b, Tensor::from_vec(&[k, n], gb)?)?;
                }
            }
            Op::Permute { x, axes } => {
                let gx = kernels::permute(g, &kernels::inverse_permutation(axes))?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Reshape(x) => {
                let gx = g.reshape(self.value(*x).shape())?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.value(*x).shape();
                let (outer, dim, inner) = kernels::split_axis(xs, *axis);
                let len = g.shape()[*axis];
                let mut gx = vec![T::zero(); outer * dim * inner];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *x, Tensor::from_vec(xs, gx)?)?;
            }
            Op::Concat { xs, axis } => {
                let mut start = 0;
                for &x in xs {
                    let len = self.value(x).shape()[*axis];
                    if self.rg(x) {
                        let gx = kernels::narrow(g, *axis, start, len)?;
                        self.accumulate(grads, x, gx)?;
                    }
                    start += len;
                }
            }
            Op::Conv2d { x, w, stride, padding } => {
                let (gx, gw) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *padding,
                    self.rg(*x),
                    self.rg(*w),
                )?;
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx)?;
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, gw)?;
                }
            }
            Op::Relu(x) => {
                let gx = self
                    .value(*x)
                    .zip_map(g, "relu", |a, d| if a <= T::zero() { T::zero() } else { d })?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Softmax { x, axis } => {
                let gx = kernels::softmax_backward(&node.value, g, *axis);
                self.accumulate(grads, *x, gx)?;
            }
            Op::Sum(x) => {
                let d = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), d))?;
            }
            Op::Mean(x) => {
                let xs = self.value(*x);
                let d = g.data()[0] / T::lit(xs.len() as f64);
                self.accumulate(grads, *x, Tensor::full(xs.shape(), d))?;
            }
            Op::MeanAxis { x, axis } => {
                let xs = self.value(*x).shape();
                let (outer, len, inner) = kernels::split_axis(xs, *axis);
                let inv = T::one() / T::lit(len as f64);
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for a in 0..len {
                        let dst = &mut gx[(o * len + a) * inner..(o * len + a + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = s * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xs, gx)?)?;
            }
            Op::Square(x) => {
                let two = T::lit(2.0);
                let gx = self.value(*x).zip_map(g, "square", |a, d| two * a * d)?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::CpReconstruct { modes, scale } => {
                let [ga, gb, gc] = kernels::cp_reconstruct_backward(
                    self.value(modes[0]),
                    self.value(modes[1]),
                    self.value(modes[2]),
                    *scale,
                    g,
                );
                self.accumulate(grads, modes[0], ga)?;
                self.accumulate(grads, modes[1], gb)?;
                self.accumulate(grads, modes[2], gc)?;
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (sum_g, sum_gx) = kernels::channel_sums(g, xhat);
                if self.rg(*gamma) {
                    self.accumulate(grads, *gamma, Tensor::from_vec(&[sum_gx.len()], sum_gx.clone())?)?;
                }
                if self.rg(*beta) {
                    self.accumulate(grads, *beta, Tensor::from_vec(&[sum_g.len()], sum_g.clone())?)?;
                }
                if self.rg(*x) {
                    let gam = self.value(*gamma).data();
                    let s = g.shape();
                    let (c, plane) = (s[1], s[2] * s[3]);
                    let count = T::lit((s[0] * plane) as f64);
                    let mut gx = g.data().to_vec();
                    for (idx, (chunk, xh)) in
                        gx.chunks_mut(plane).zip(xhat.data().chunks(plane)).enumerate()
                    {
                        let ch = idx % c;
                        let k = gam[ch] * inv_std[ch];
                        if *train {
                            let mg = sum_g[ch] / count;
                            let mgx = sum_gx[ch] / count;
                            for (d, &h) in chunk.iter_mut().zip(xh) {
                                *d = k * (*d - mg - h * mgx);
                            }
                        } else {
                            for d in chunk.iter_mut() {
                                *d = k * *d;
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(s, gx)?)?;
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = probs.shape()[1];
                let scale = g.data()[0] / T::lit(labels.len() as f64);
                let mut gl = probs.data().to_vec();
                for (row, &y) in labels.iter().enumerate() {
                    gl[row * k + y] -= T::one();
                }
                gl.iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, *logits, Tensor::from_vec(probs.shape(), gl)?)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = g.sum(w);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::ones(&[2]));
        let s = g.square(w);
        assert_eq!(g.backward(s).unwrap_err(), Error::NonScalarRoot(vec![2]));
    }

    #[test]
    fn constants_never_receive_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::ones(&[3]));
        let c = g.constant(Tensor::full(&[3], 2.0));
        let p = g.mul(w, c).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn reused_node_accumulates() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::scalar(3.0));
        let a = g.add(w, w).unwrap();
        let b = g.mul(a, w).unwrap(); // 2w^2
        let grads = g.backward(b).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[12.0]);
    }

    #[test]
    fn singleton_train_batch_norm_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[1, 2, 1, 1]));
        let gm = g.param(Tensor::ones(&[2]));
        let bt = g.param(Tensor::zeros(&[2]));
        assert!(g.batch_norm_train(x, gm, bt, 1e-5).is_err());
        let bad = g.param(Tensor::ones(&[3]));
        assert!(matches!(
            g.batch_norm_eval(x, bad, bt, &[0.0; 2], &[1.0; 2], 1e-5),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}

//! Raw kernels over row-major slices.
//!
//! These are shared by the autodiff graph (forward and backward passes) and by
//! the tensor-level convenience functions. Every loop has a fixed iteration
//! order, so results are bit-reproducible for identical inputs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `c[m×n] += a[m×k] · b[k×n]`.
pub fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += aᵀ · b` where `a` is stored `[k×m]` and `b` is `[k×n]`.
pub fn gemm_at<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a · bᵀ` where `a` is `[m×k]` and `b` is stored `[n×k]`.
pub fn gemm_bt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a, "matmul")?;
    let (k2, n) = dims2(b, "matmul")?;
    if k != k2 {
        return Err(shape_err(
            "matmul",
            format!("inner dims differ: [{m},{k}] x [{k2},{n}]"),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, a.data(), b.data(), &mut out);
    Tensor::from_vec(&[m, n], out)
}

pub(crate) fn dims2<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        &[m, n] => Ok((m, n)),
        s => Err(shape_err(op, format!("expected a 2-D tensor, got {s:?}"))),
    }
}

/// Geometry of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub height: usize,
    pub width: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn out_extent(name: &str, size: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = size + 2 * padding;
    if padded < k {
        return Err(shape_err(
            "conv2d",
            format!("{name} {size} with padding {padding} is smaller than kernel {k}"),
        ));
    }
    if !(padded - k).is_multiple_of(stride) {
        return Err(shape_err(
            "conv2d",
            format!(
                "{name}: ({size} + 2*{padding} - {k}) is not divisible by stride {stride}"
            ),
        ));
    }
    Ok((padded - k) / stride + 1)
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let &[batch, c_in, height, width] = input else {
            return Err(shape_err("conv2d", format!("input must be [N,C,H,W], got {input:?}")));
        };
        let &[c_out, wc_in, kh, kw] = weight else {
            return Err(shape_err(
                "conv2d",
                format!("weight must be [C_out,C_in,k,k], got {weight:?}"),
            ));
        };
        if kh != kw {
            return Err(shape_err("conv2d", format!("kernel must be square, got {kh}x{kw}")));
        }
        if wc_in != c_in {
            return Err(shape_err(
                "conv2d",
                format!("C_in: input has {c_in} channels, weight expects {wc_in}"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let out_h = out_extent("H", height, kh, stride, padding)?;
        let out_w = out_extent("W", width, kw, stride, padding)?;
        Ok(ConvGeometry {
            batch,
            c_in,
            height,
            width,
            c_out,
            kernel: kh,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let ncol = self.col_cols();
        for ci in 0..self.c_in {
            let plane = &x[ci * self.height * self.width..(ci + 1) * self.height * self.width];
            for kh in 0..k {
                for kw in 0..k {
                    let row = (ci * k + kh) * k + kw;
                    let dst = &mut cols[row * ncol..(row + 1) * ncol];
                    for oh in 0..self.out_h {
                        let ih = (oh * s + kh) as isize - p as isize;
                        for ow in 0..self.out_w {
                            let iw = (ow * s + kw) as isize - p as isize;
                            dst[oh * self.out_w + ow] = if ih >= 0
                                && (ih as usize) < self.height
                                && iw >= 0
                                && (iw as usize) < self.width
                            {
                                plane[ih as usize * self.width + iw as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let ncol = self.col_cols();
        for ci in 0..self.c_in {
            let plane =
                &mut dx[ci * self.height * self.width..(ci + 1) * self.height * self.width];
            for kh in 0..k {
                for kw in 0..k {
                    let row = (ci * k + kh) * k + kw;
                    let src = &cols[row * ncol..(row + 1) * ncol];
                    for oh in 0..self.out_h {
                        let ih = (oh * s + kh) as isize - p as isize;
                        if ih < 0 || ih as usize >= self.height {
                            continue;
                        }
                        for ow in 0..self.out_w {
                            let iw = (ow * s + kw) as isize - p as isize;
                            if iw < 0 || iw as usize >= self.width {
                                continue;
                            }
                            plane[ih as usize * self.width + iw as usize] +=
                                src[oh * self.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `input [N,C_in,H,W]` with `weight [C_out,C_in,k,k]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let in_stride = g.c_in * g.height * g.width;
    let out_stride = g.c_out * ncol;
    let mut cols = vec![T::zero(); rows * ncol];
    let mut out = vec![T::zero(); g.batch * out_stride];
    for n in 0..g.batch {
        g.im2col(&input.data()[n * in_stride..(n + 1) * in_stride], &mut cols);
        gemm(
            g.c_out,
            rows,
            ncol,
            weight.data(),
            &cols,
            &mut out[n * out_stride..(n + 1) * out_stride],
        );
    }
    Tensor::from_vec(&[g.batch, g.c_out, g.out_h, g.out_w], out)
}

/// Gradients of [`conv2d`] with respect to input and weight. Either side is
/// skipped when not requested.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    want_input: bool,
    want_weight: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let in_stride = g.c_in * g.height * g.width;
    let out_stride = g.c_out * ncol;
    let mut cols = vec![T::zero(); rows * ncol];
    let mut dx = want_input.then(|| vec![T::zero(); input.len()]);
    let mut dw = want_weight.then(|| vec![T::zero(); weight.len()]);
    for n in 0..g.batch {
        let go = &grad_out.data()[n * out_stride..(n + 1) * out_stride];
        if let Some(dw) = dw.as_mut() {
            g.im2col(&input.data()[n * in_stride..(n + 1) * in_stride], &mut cols);
            gemm_bt(g.c_out, ncol, rows, go, &cols, dw);
        }
        if let Some(dx) = dx.as_mut() {
            cols.iter_mut().for_each(|c| *c = T::zero());
            gemm_at(rows, g.c_out, ncol, weight.data(), go, &mut cols);
            g.col2im(&cols, &mut dx[n * in_stride..(n + 1) * in_stride]);
        }
    }
    let dx = dx.map(|d| Tensor::from_vec(input.shape(), d)).transpose()?;
    let dw = dw.map(|d| Tensor::from_vec(weight.shape(), d)).transpose()?;
    Ok((dx, dw))
}

/// Splits `shape` around `axis` into `(outer, axis_len, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn check_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::InvalidArgument(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

/// Softmax along `axis`, with the running maximum subtracted before
/// exponentiation.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis(x.shape(), axis, "softmax")?;
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let mut max = T::neg_infinity();
            for a in 0..len {
                max = max.max(src[idx(a)]);
            }
            let mut total = T::zero();
            for a in 0..len {
                let e = (src[idx(a)] - max).exp();
                out[idx(a)] = e;
                total += e;
            }
            for a in 0..len {
                out[idx(a)] = out[idx(a)] / total;
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

pub(crate) fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = split_axis(y.shape(), axis);
    let (yv, gv) = (y.data(), dy.data());
    let mut dx = vec![T::zero(); yv.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let mut dot = T::zero();
            for a in 0..len {
                dot += yv[idx(a)] * gv[idx(a)];
            }
            for a in 0..len {
                dx[idx(a)] = yv[idx(a)] * (gv[idx(a)] - dot);
            }
        }
    }
    Tensor::from_vec(y.shape(), dx).expect("shape preserved")
}

/// General axis permutation: `out.shape[i] = x.shape[axes[i]]`.
pub fn permute<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let nd = x.ndim();
    let mut seen = vec![false; nd];
    if axes.len() != nd || axes.iter().any(|&a| a >= nd || core::mem::replace(&mut seen[a], true))
    {
        return Err(Error::InvalidArgument(format!(
            "permute: {axes:?} is not a permutation of {nd} axes"
        )));
    }
    let in_shape = x.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..src.len() {
        out.push(src[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::from_vec(&out_shape, out)
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Slice `[start, start+len)` along `axis`.
pub fn narrow<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    check_axis(x.shape(), axis, "narrow")?;
    let (outer, dim, inner) = split_axis(x.shape(), axis);
    if len == 0 || start + len > dim {
        return Err(shape_err(
            "narrow",
            format!("range {start}..{} exceeds axis {axis} of size {dim}", start + len),
        ));
    }
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * dim + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::from_vec(&shape, out)
}

/// Concatenation along `axis`; all other dims must agree.
pub fn concat<T: Scalar>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    check_axis(first.shape(), axis, "concat")?;
    let mut total = 0;
    for x in xs {
        let ok = x.ndim() == first.ndim()
            && x
                .shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(shape_err(
                "concat",
                format!("{:?} incompatible with {:?} along axis {axis}", x.shape(), first.shape()),
            ));
        }
        total += x.shape()[axis];
    }
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for x in xs {
            let chunk = x.shape()[axis] * inner;
            out.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::from_vec(&shape, out)
}

/// Mean along `axis`, keeping it with size one.
pub fn mean_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis(x.shape(), axis, "mean_axis")?;
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let inv = T::one() / T::lit(len as f64);
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for a in 0..len {
            let src = &x.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
            for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *dst += v;
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    Tensor::from_vec(&shape, out)
}

/// `out[i,j,l] = scale · Σ_r a[r,i]·b[r,j]·c[r,l]` for factor matrices stored
/// one rank-1 term per row.
pub fn cp_reconstruct<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    scale: T,
) -> Result<Tensor<T>> {
    let (r, d1) = dims2(a, "cp_reconstruct")?;
    let (rb, d2) = dims2(b, "cp_reconstruct")?;
    let (rc, d3) = dims2(c, "cp_reconstruct")?;
    if rb != r || rc != r {
        return Err(shape_err(
            "cp_reconstruct",
            format!("factor ranks differ: {r}, {rb}, {rc}"),
        ));
    }
    let mut out = vec![T::zero(); d1 * d2 * d3];
    let (av, bv, cv) = (a.data(), b.data(), c.data());
    for t in 0..r {
        let crow = &cv[t * d3..(t + 1) * d3];
        for i in 0..d1 {
            let ai = av[t * d1 + i] * scale;
            for j in 0..d2 {
                let aij = ai * bv[t * d2 + j];
                let dst = &mut out[(i * d2 + j) * d3..(i * d2 + j + 1) * d3];
                for (o, &cl) in dst.iter_mut().zip(crow) {
                    *o += aij * cl;
                }
            }
        }
    }
    Tensor::from_vec(&[d1, d2, d3], out)
}

/// Gradients of [`cp_reconstruct`] with respect to the three factor matrices.
pub(crate) fn cp_reconstruct_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    scale: T,
    grad: &Tensor<T>,
) -> [Tensor<T>; 3] {
    let (r, d1) = (a.shape()[0], a.shape()[1]);
    let (d2, d3) = (b.shape()[1], c.shape()[1]);
    let (av, bv, cv, g) = (a.data(), b.data(), c.data(), grad.data());
    let mut ga = vec![T::zero(); r * d1];
    let mut gb = vec![T::zero(); r * d2];
    let mut gc = vec![T::zero(); r * d3];
    for t in 0..r {
        let crow = &cv[t * d3..(t + 1) * d3];
        for i in 0..d1 {
            let ai = av[t * d1 + i];
            let mut acc_a = T::zero();
            for j in 0..d2 {
                let bj = bv[t * d2 + j];
                let gij = &g[(i * d2 + j) * d3..(i * d2 + j + 1) * d3];
                // <G[i,j,:], c_t>
                let mut dot = T::zero();
                for (&gl, &cl) in gij.iter().zip(crow) {
                    dot += gl * cl;
                }
                acc_a += dot * bj;
                gb[t * d2 + j] += dot * ai;
                let aibj = ai * bj;
                for (l, &gl) in gij.iter().enumerate() {
                    gc[t * d3 + l] += gl * aibj;
                }
            }
            ga[t * d1 + i] = acc_a;
        }
    }
    for v in ga.iter_mut().chain(gb.iter_mut()).chain(gc.iter_mut()) {
        *v *= scale;
    }
    [
        Tensor::from_vec(a.shape(), ga).expect("shape"),
        Tensor::from_vec(b.shape(), gb).expect("shape"),
        Tensor::from_vec(c.shape(), gc).expect("shape"),
    ]
}

/// Per-channel statistics of a `[N,C,H,W]` tensor: biased mean and variance.
pub fn channel_moments<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let &[n, c, h, w] = x.shape() else {
        return Err(shape_err("batchnorm", format!("expected [N,C,H,W], got {:?}", x.shape())));
    };
    let plane = h * w;
    let count = T::lit((n * plane) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let xs = x.data();
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for &v in &xs[base..base + plane] {
                s += v;
            }
        }
        let m = s / count;
        let mut q = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for &v in &xs[base..base + plane] {
                let d = v - m;
                q += d * d;
            }
        }
        mean[ch] = m;
        var[ch] = q / count;
    }
    Ok((mean, var))
}

/// Normalized activations `(x - mean) * inv_std` per channel.
pub(crate) fn channel_normalize<T: Scalar>(x: &Tensor<T>, mean: &[T], inv_std: &[T]) -> Tensor<T> {
    let s = x.shape();
    let (c, plane) = (s[1], s[2] * s[3]);
    let mut out = x.data().to_vec();
    for (idx, chunk) in out.chunks_mut(plane).enumerate() {
        let ch = idx % c;
        for v in chunk {
            *v = (*v - mean[ch]) * inv_std[ch];
        }
    }
    Tensor::from_vec(s, out).expect("shape preserved")
}

/// `gamma[c] * xhat + beta[c]` per channel.
pub(crate) fn channel_affine<T: Scalar>(xhat: &Tensor<T>, gamma: &[T], beta: &[T]) -> Tensor<T> {
    let s = xhat.shape();
    let (c, plane) = (s[1], s[2] * s[3]);
    let mut out = xhat.data().to_vec();
    for (idx, chunk) in out.chunks_mut(plane).enumerate() {
        let ch = idx % c;
        for v in chunk {
            *v = gamma[ch] * *v + beta[ch];
        }
    }
    Tensor::from_vec(s, out).expect("shape preserved")
}

/// Per-channel sums of `a` and of `a * b` over N, H, W.
pub(crate) fn channel_sums<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let s = a.shape();
    let (c, plane) = (s[1], s[2] * s[3]);
    let mut sa = vec![T::zero(); c];
    let mut sab = vec![T::zero(); c];
    for (idx, (ca, cb)) in a.data().chunks(plane).zip(b.data().chunks(plane)).enumerate() {
        let ch = idx % c;
        for (&x, &y) in ca.iter().zip(cb) {
            sa[ch] += x;
            sab[ch] += x * y;
        }
    }
    (sa, sab)
}

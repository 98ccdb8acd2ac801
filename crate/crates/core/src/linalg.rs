//! Dense double-precision linear algebra for small matrices.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Thin SVD `A = U diag(s) Vᵀ` with singular values in descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    /// `[m, k]` with `k = min(m, n)`.
    pub u: Tensor<f64>,
    pub s: Vec<f64>,
    /// `[n, k]`.
    pub v: Tensor<f64>,
}

const JACOBI_MAX_SWEEPS: usize = 80;

/// One-sided Jacobi SVD.
pub fn svd(a: &Tensor<f64>) -> Result<Svd> {
    let (m, n) = kernels::dims2(a, "svd")?;
    if m < n {
        let at = kernels::permute(a, &[1, 0])?;
        let Svd { u, s, v } = svd(&at)?;
        return Ok(Svd { u: v, s, v: u });
    }
    // Column-major working copies: cols[j] is column j of A, rotated in place.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.data()[i * n + j]).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let tol = 1e-15;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..m {
                    let (x, y) = (cols[p][i], cols[q][i]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || gamma.abs() <= tol * libm::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + libm::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                let (lo, hi) = vcols.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<(f64, usize)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (libm::sqrt(c.iter().map(|x| x * x).sum::<f64>()), j))
        .collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    let k = n;
    let mut u = vec![0.0; m * k];
    let mut v = vec![0.0; n * k];
    let mut s = Vec::with_capacity(k);
    for (col, &(sigma, j)) in order.iter().enumerate() {
        s.push(sigma);
        if sigma > 0.0 {
            for i in 0..m {
                u[i * k + col] = cols[j][i] / sigma;
            }
        }
        for i in 0..n {
            v[i * k + col] = vcols[j][i];
        }
    }
    Ok(Svd { u: Tensor::from_vec(&[m, k], u)?, s, v: Tensor::from_vec(&[n, k], v)? })
}

fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (p, q) = (*a, *b);
        *a = c * p - s * q;
        *b = s * p + c * q;
    }
}

/// Lower Cholesky factor of a symmetric `n×n` matrix, or `None` if a pivot
/// is not positive.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return None;
                }
                l[i * n + i] = libm::sqrt(sum);
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solves `(G + λI) X = B` for symmetric positive semi-definite `G [n×n]` and
/// `B [n×p]` (row-major). If the factorization fails, `λ` is raised tenfold
/// until it succeeds. Returns the solution and the damping used.
pub fn solve_spd_damped(g: &[f64], b: &[f64], n: usize, p: usize, lambda: f64) -> Result<(Vec<f64>, f64)> {
    if g.len() != n * n || b.len() != n * p {
        return Err(Error::InvalidArgument(format!("solve: G must be {n}x{n} and B {n}x{p}")));
    }
    let scale = (0..n).map(|i| g[i * n + i].abs()).fold(0.0, f64::max).max(1.0);
    let mut lam = lambda;
    for _ in 0..40 {
        let mut a = g.to_vec();
        for i in 0..n {
            a[i * n + i] += lam;
        }
        if let Some(l) = cholesky(&a, n) {
            let mut x = b.to_vec();
            for col in 0..p {
                // forward: L y = b
                for i in 0..n {
                    let mut s = x[i * p + col];
                    for k in 0..i {
                        s -= l[i * n + k] * x[k * p + col];
                    }
                    x[i * p + col] = s / l[i * n + i];
                }
                // back: Lᵀ x = y
                for i in (0..n).rev() {
                    let mut s = x[i * p + col];
                    for k in i + 1..n {
                        s -= l[k * n + i] * x[k * p + col];
                    }
                    x[i * p + col] = s / l[i * n + i];
                }
            }
            if x.iter().all(|v| v.is_finite()) {
                return Ok((x, lam));
            }
        }
        lam = if lam > 0.0 { lam * 10.0 } else { 1e-12 * scale };
    }
    Err(Error::InvalidArgument("damped solve failed to produce a finite solution".into()))
}

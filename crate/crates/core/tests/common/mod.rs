#![allow(dead_code)]

use ftn_core::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform(-1, 1) entries.
pub fn randt(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Direct nested-loop cross-correlation.
pub fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for b in 0..n {
        for o in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for u in 0..k {
                            for v in 0..k {
                                let (y, z) = ((i * stride + u) as isize - pad as isize, (j * stride + v) as isize - pad as isize);
                                if y < 0 || z < 0 || y >= h as isize || z >= wd as isize {
                                    continue;
                                }
                                acc += x.get(&[b, c, y as usize, z as usize]).unwrap() * w.get(&[o, c, u, v]).unwrap();
                            }
                        }
                    }
                    out.set(&[b, o, i, j], acc).unwrap();
                }
            }
        }
    }
    out
}

pub fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.get(&[i, p]).unwrap() * b.get(&[p, j]).unwrap();
            }
            out.set(&[i, j], s).unwrap();
        }
    }
    out
}

/// `scale · Σ_r a_r[i] b_r[j] c_r[l]` with factors stored `[R, D]`.
pub fn cp_oracle(a: &Tensor<f64>, b: &Tensor<f64>, c: &Tensor<f64>, scale: f64) -> Tensor<f64> {
    let (r, d1, d2, d3) = (a.shape()[0], a.shape()[1], b.shape()[1], c.shape()[1]);
    let mut out = Tensor::zeros(&[d1, d2, d3]);
    for i in 0..d1 {
        for j in 0..d2 {
            for l in 0..d3 {
                let mut s = 0.0;
                for t in 0..r {
                    s += a.get(&[t, i]).unwrap() * b.get(&[t, j]).unwrap() * c.get(&[t, l]).unwrap();
                }
                out.set(&[i, j, l], scale * s).unwrap();
            }
        }
    }
    out
}

/// Per-channel `γ (u − μ)/√(σ² + ε) + β`.
pub fn bn_oracle(u: &Tensor<f64>, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], eps: f64) -> Tensor<f64> {
    let s = u.shape();
    let mut out = u.clone();
    for n in 0..s[0] {
        for c in 0..s[1] {
            for i in 0..s[2] {
                for j in 0..s[3] {
                    let v = u.get(&[n, c, i, j]).unwrap();
                    out.set(&[n, c, i, j], gamma[c] * (v - mean[c]) / (var[c] + eps).sqrt() + beta[c]).unwrap();
                }
            }
        }
    }
    out
}

/// Biased per-channel moments by direct summation.
pub fn moments_oracle(u: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let s = u.shape();
    let cnt = (s[0] * s[2] * s[3]) as f64;
    let mut mean = vec![0.0; s[1]];
    let mut var = vec![0.0; s[1]];
    for c in 0..s[1] {
        let mut acc = 0.0;
        for n in 0..s[0] {
            for i in 0..s[2] {
                for j in 0..s[3] {
                    acc += u.get(&[n, c, i, j]).unwrap();
                }
            }
        }
        mean[c] = acc / cnt;
        let mut sq = 0.0;
        for n in 0..s[0] {
            for i in 0..s[2] {
                for j in 0..s[3] {
                    let d = u.get(&[n, c, i, j]).unwrap() - mean[c];
                    sq += d * d;
                }
            }
        }
        var[c] = sq / cnt;
    }
    (mean, var)
}

/// Self-attention computed head by head with explicit loops. Weights are
/// `[d_model, d, n]`; the output projection maps `i·d + j` to `m` through
/// `wo[m, j, i]`.
pub fn mhsa_oracle(x: &Tensor<f64>, wq: &Tensor<f64>, wk: &Tensor<f64>, wv: &Tensor<f64>, wo: &Tensor<f64>) -> Tensor<f64> {
    let (s, dm) = (x.shape()[0], x.shape()[1]);
    let (d, n) = (wq.shape()[1], wq.shape()[2]);
    let proj = |w: &Tensor<f64>, head: usize| {
        let mut out = vec![vec![0.0; d]; s];
        for (t, row) in out.iter_mut().enumerate() {
            for (j, o) in row.iter_mut().enumerate() {
                for m in 0..dm {
                    *o += x.get(&[t, m]).unwrap() * w.get(&[m, j, head]).unwrap();
                }
            }
        }
        out
    };
    let mut out = Tensor::zeros(&[s, dm]);
    for head in 0..n {
        let (q, k, v) = (proj(wq, head), proj(wk, head), proj(wv, head));
        for t in 0..s {
            let scores: Vec<f64> = (0..s)
                .map(|u| (0..d).map(|j| q[t][j] * k[u][j]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|z| (z - mx).exp()).collect();
            let tot: f64 = e.iter().sum();
            for j in 0..d {
                let h: f64 = (0..s).map(|u| e[u] / tot * v[u][j]).sum();
                for m in 0..dm {
                    let prev = out.get(&[t, m]).unwrap();
                    out.set(&[t, m], prev + h * wo.get(&[m, j, head]).unwrap()).unwrap();
                }
            }
        }
    }
    out
}

/// Relative error used for gradient checks: `|a − n| / max(|a|, |n|, floor)`.
/// The floor keeps coordinates whose true gradient is ~0 from turning
/// round-off into huge ratios.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn grad_rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR)
}

/// Compares analytic gradients of the scalar `build(g, params)` with central
/// differences at up to `per_param` sampled coordinates of every parameter.
/// Returns `(worst relative error, coordinates checked)`.
pub fn gradcheck(
    params: &[Tensor<f64>],
    per_param: usize,
    seed: u64,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> (f64, usize) {
    let eps = 1e-5;
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = build(&mut g, &vars);
    let grads = g.backward(root).unwrap();
    let eval = |ps: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let root = build(&mut g, &vars);
        g.value(root).item().unwrap()
    };
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut count = 0;
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get(vars[pi]).cloned().unwrap_or_else(|| Tensor::zeros(p.shape()));
        let coords: Vec<usize> = if p.len() <= per_param {
            (0..p.len()).collect()
        } else {
            (0..per_param).map(|_| r.random_range(0..p.len())).collect()
        };
        for idx in coords {
            let mut ps = params.to_vec();
            ps[pi].data_mut()[idx] += eps;
            let up = eval(&ps);
            ps[pi].data_mut()[idx] -= 2.0 * eps;
            let down = eval(&ps);
            let numeric = (up - down) / (2.0 * eps);
            let e = grad_rel_err(analytic.data()[idx], numeric);
            assert!(e.is_finite(), "param {pi} coord {idx}: non-finite comparison");
            worst = worst.max(e);
            count += 1;
        }
    }
    (worst, count)
}

//! Post-training factorization of weight deltas and norm-based pruning.
//!
//! Conv deltas `[C_out, C_in, k, k]` are viewed as `[k², C_in, C_out]` for
//! CP and TT, and as the `[k²·C_in, C_out]` unfolding of that cube for the
//! matrix SVD.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{conv_weight_as_cube, AdapterTarget, CpAdapter};
use crate::error::{shape_err, Error, Result};
use crate::kernels;
use crate::layers::{mix_seed, TaskAdapterSet};
use crate::linalg::{self, Svd};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-layer `ΔW_l = W_{t,l} − W_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSet {
    pub layers: Vec<(String, Tensor<f64>)>,
}

/// Elementwise differences of two equally-named, equally-shaped weight sets.
pub fn extract_deltas<T: Scalar>(
    finetuned: &[(String, Tensor<T>)],
    base: &[(String, Tensor<T>)],
) -> Result<DeltaSet> {
    if finetuned.len() != base.len() {
        return Err(Error::InvalidArgument(format!(
            "weight sets differ in size: {} vs {}",
            finetuned.len(),
            base.len()
        )));
    }
    let mut layers = Vec::with_capacity(base.len());
    for ((fname, ft), (bname, bt)) in finetuned.iter().zip(base) {
        if fname != bname {
            return Err(Error::InvalidArgument(format!("layer names differ: `{fname}` vs `{bname}`")));
        }
        if ft.shape() != bt.shape() {
            return Err(shape_err(
                "extract_deltas",
                format!("`{fname}`: {:?} vs {:?}", ft.shape(), bt.shape()),
            ));
        }
        layers.push((fname.clone(), ft.cast::<f64>().sub(&bt.cast::<f64>())?));
    }
    Ok(DeltaSet { layers })
}

/// CP-ALS settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpAlsOptions {
    pub max_sweeps: usize,
    /// Stop once the relative error changes by less than this between sweeps.
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
    /// Proximal damping toward the previous iterate in each least-squares
    /// subproblem.
    pub ridge: f64,
}

impl Default for CpAlsOptions {
    fn default() -> Self {
        CpAlsOptions { max_sweeps: 200, tol: 1e-8, restarts: 5, seed: 0, ridge: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpAlsResult {
    pub adapter: CpAdapter<f64>,
    /// `‖t − reconstruct‖_F / ‖t‖_F` of the best restart (zero for a zero
    /// tensor).
    pub rel_error: f64,
    /// Relative error before the first sweep and after each sweep, per
    /// restart.
    pub history: Vec<Vec<f64>>,
    pub best_restart: usize,
}

fn dims3(t: &Tensor<f64>, op: &'static str) -> Result<[usize; 3]> {
    match t.shape() {
        &[a, b, c] => Ok([a, b, c]),
        s => Err(shape_err(op, format!("expected a 3-D tensor, got {s:?}"))),
    }
}

fn rel_error(t: &Tensor<f64>, factors: &[Tensor<f64>; 3], norm: f64) -> f64 {
    let approx = kernels::cp_reconstruct(&factors[0], &factors[1], &factors[2], 1.0).expect("factor shapes");
    let err = libm::sqrt(t.data().iter().zip(approx.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
    err / norm
}

/// Gram matrix `F Fᵀ` of a `[R, D]` factor.
fn gram(f: &Tensor<f64>) -> Vec<f64> {
    let (r, d) = (f.shape()[0], f.shape()[1]);
    let mut g = vec![0.0; r * r];
    kernels::gemm_bt(r, d, r, f.data(), f.data(), &mut g);
    g
}

/// Matricized-tensor times Khatri–Rao product for `mode`, as `[R, D_mode]`.
fn mttkrp(t: &Tensor<f64>, f: &[Tensor<f64>; 3], mode: usize) -> Vec<f64> {
    let [i_n, j_n, k_n] = dims3(t, "mttkrp").expect("3-D");
    let r = f[0].shape()[0];
    let x = t.data();
    let (a, b, c) = (f[0].data(), f[1].data(), f[2].data());
    let mut out = vec![0.0; r * [i_n, j_n, k_n][mode]];
    for rr in 0..r {
        let (ar, br, cr) = (&a[rr * i_n..], &b[rr * j_n..], &c[rr * k_n..]);
        for i in 0..i_n {
            for j in 0..j_n {
                let fiber = &x[(i * j_n + j) * k_n..(i * j_n + j + 1) * k_n];
                match mode {
                    0 | 1 => {
                        let mut dot = 0.0;
                        for (&v, &ck) in fiber.iter().zip(&cr[..k_n]) {
                            dot += v * ck;
                        }
                        if mode == 0 {
                            out[rr * i_n + i] += dot * br[j];
                        } else {
                            out[rr * j_n + j] += dot * ar[i];
                        }
                    }
                    _ => {
                        let w = ar[i] * br[j];
                        let dst = &mut out[rr * k_n..(rr + 1) * k_n];
                        for (o, &v) in dst.iter_mut().zip(fiber) {
                            *o += w * v;
                        }
                    }
                }
            }
        }
    }
    out
}

fn als_update(t: &Tensor<f64>, f: &mut [Tensor<f64>; 3], mode: usize, ridge: f64) -> Result<()> {
    let r = f[0].shape()[0];
    let d = f[mode].shape()[1];
    let (o1, o2) = match mode {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let g1 = gram(&f[o1]);
    let g2 = gram(&f[o2]);
    let g: Vec<f64> = g1.iter().zip(&g2).map(|(x, y)| x * y).collect();
    let mut rhs = mttkrp(t, f, mode);
    for (v, &old) in rhs.iter_mut().zip(f[mode].data()) {
        *v += ridge * old;
    }
    let (sol, _) = linalg::solve_spd_damped(&g, &rhs, r, d, ridge)?;
    f[mode] = Tensor::from_vec(&[r, d], sol)?;
    Ok(())
}

fn run_als(t: &Tensor<f64>, mut f: [Tensor<f64>; 3], norm: f64, opts: &CpAlsOptions) -> Result<([Tensor<f64>; 3], Vec<f64>)> {
    let mut history = vec![rel_error(t, &f, norm)];
    // round-off can nudge a converged sweep up by an ulp; keep the best
    let mut best = (f.clone(), history[0]);
    for _ in 0..opts.max_sweeps {
        for mode in 0..3 {
            als_update(t, &mut f, mode, opts.ridge)?;
        }
        let e = rel_error(t, &f, norm);
        let prev = *history.last().expect("non-empty");
        history.push(e);
        if e < best.1 {
            best = (f.clone(), e);
        }
        if (prev - e).abs() < opts.tol || e < 1e-15 {
            break;
        }
    }
    Ok((best.0, history))
}

/// Rank-`R` CP decomposition by alternating least squares, best of
/// `opts.restarts` random starts.
pub fn cp_als(t: &Tensor<f64>, rank: usize, opts: &CpAlsOptions) -> Result<CpAlsResult> {
    cp_als_warm(t, rank, opts, None)
}

/// Like [`cp_als`], with an extra start from `warm` (a lower-rank solution)
/// padded to `rank`. The padding leaves the warm reconstruction unchanged, so
/// the result is never worse than `warm`.
pub fn cp_als_warm(
    t: &Tensor<f64>,
    rank: usize,
    opts: &CpAlsOptions,
    warm: Option<&CpAdapter<f64>>,
) -> Result<CpAlsResult> {
    let dims = dims3(t, "cp_als")?;
    if rank == 0 {
        return Err(Error::InvalidArgument("CP rank must be at least 1".into()));
    }
    if opts.restarts == 0 && warm.is_none() {
        return Err(Error::InvalidArgument("cp_als needs at least one start".into()));
    }
    let norm = t.frobenius_norm();
    if norm == 0.0 {
        return Ok(CpAlsResult {
            adapter: CpAdapter::zeros(dims, rank, 1.0)?,
            rel_error: 0.0,
            history: vec![vec![0.0]],
            best_restart: 0,
        });
    }
    let mut starts: Vec<[Tensor<f64>; 3]> = Vec::new();
    if let Some(w) = warm {
        if w.dims() != dims || w.rank() > rank {
            return Err(shape_err("cp_als", format!("warm start {:?} rank {} does not fit", w.dims(), w.rank())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, u64::MAX));
        let extra = rank - w.rank();
        let mut padded = Vec::with_capacity(3);
        for (m, f) in w.factor_matrices().iter().enumerate() {
            // fold the adapter scale into the first mode
            let f = if m == 0 { f.scale(w.scale()) } else { f.clone() };
            if extra == 0 {
                padded.push(f);
                continue;
            }
            // New terms start with a zero first mode so the reconstruction is
            // exactly the warm one.
            let pad = if m == 0 {
                Tensor::zeros(&[extra, dims[m]])
            } else {
                Tensor::rand_normal(&[extra, dims[m]], 0.0, 1.0, &mut rng)
            };
            padded.push(kernels::concat(&[&f, &pad], 0)?);
        }
        let [a, b, c]: [Tensor<f64>; 3] = padded.try_into().expect("three modes");
        starts.push([a, b, c]);
    }
    for restart in 0..opts.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, restart as u64));
        starts.push(dims.map(|d| Tensor::rand_normal(&[rank, d], 0.0, 1.0, &mut rng)));
    }
    let mut best: Option<([Tensor<f64>; 3], f64, usize)> = None;
    let mut history = Vec::with_capacity(starts.len());
    for (idx, start) in starts.into_iter().enumerate() {
        let (f, h) = run_als(t, start, norm, opts)?;
        let e = h.iter().cloned().fold(f64::INFINITY, f64::min);
        if best.as_ref().is_none_or(|(_, be, _)| e < *be) {
            best = Some((f, e, idx));
        }
        history.push(h);
    }
    let (factors, rel_error, best_restart) = best.expect("at least one start");
    Ok(CpAlsResult { adapter: CpAdapter::new(factors, 1.0)?, rel_error, history, best_restart })
}

/// Rank selection for TT-SVD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtTruncation {
    /// Maximum internal ranks `r_1..r_{d-1}` (capped at what each unfolding
    /// allows).
    Ranks(Vec<usize>),
    /// Same maximum rank at every bond.
    Uniform(usize),
    /// Relative accuracy `ε`: each step discards at most
    /// `ε·‖t‖_F/√(d−1)` of singular-value energy.
    Epsilon(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtResult {
    /// Core `k` has shape `[r_{k-1}, n_k, r_k]` with `r_0 = r_d = 1`.
    pub cores: Vec<Tensor<f64>>,
    pub ranks: Vec<usize>,
    /// `δ_k`: discarded singular-value norm at each step.
    pub discarded: Vec<f64>,
    /// `√(Σ_k δ_k²)`.
    pub bound: f64,
    /// Frobenius norm of `t − reconstruct(cores)`.
    pub error: f64,
}

impl TtResult {
    pub fn parameter_count(&self) -> usize {
        self.cores.iter().map(|c| c.len()).sum()
    }
}

/// Contracts TT cores back to a dense tensor.
pub fn tt_reconstruct(cores: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    let first = cores.first().ok_or_else(|| Error::InvalidArgument("no TT cores".into()))?;
    let mut shape = vec![first.shape()[1]];
    let r1 = first.shape()[2];
    let mut acc = first.reshape(&[first.shape()[1], r1])?;
    for core in &cores[1..] {
        let &[rp, n, rn] = core.shape() else {
            return Err(shape_err("tt_reconstruct", format!("core {:?} is not 3-D", core.shape())));
        };
        let (rows, ra) = (acc.shape()[0], acc.shape()[1]);
        if ra != rp {
            return Err(shape_err("tt_reconstruct", format!("bond {ra} vs {rp}")));
        }
        let c2 = core.reshape(&[rp, n * rn])?;
        let mut out = vec![0.0; rows * n * rn];
        kernels::gemm(rows, rp, n * rn, acc.data(), c2.data(), &mut out);
        acc = Tensor::from_vec(&[rows * n, rn], out)?;
        shape.push(n);
    }
    acc.reshape(&shape)
}

/// Sequential truncated SVDs of the unfoldings.
pub fn tt_svd(t: &Tensor<f64>, trunc: &TtTruncation) -> Result<TtResult> {
    let dims = t.shape().to_vec();
    let d = dims.len();
    if d < 2 {
        return Err(shape_err("tt_svd", format!("need at least 2 modes, got {dims:?}")));
    }
    let max_ranks: Vec<Option<usize>> = match trunc {
        TtTruncation::Ranks(r) => {
            if r.len() != d - 1 || r.contains(&0) {
                return Err(Error::InvalidArgument(format!(
                    "TT ranks must be {} positive values, got {r:?}",
                    d - 1
                )));
            }
            r.iter().map(|&x| Some(x)).collect()
        }
        TtTruncation::Uniform(r) => {
            if *r == 0 {
                return Err(Error::InvalidArgument("TT rank must be positive".into()));
            }
            vec![Some(*r); d - 1]
        }
        TtTruncation::Epsilon(eps) => {
            if !(*eps >= 0.0) {
                return Err(Error::InvalidArgument("TT epsilon must be non-negative".into()));
            }
            vec![None; d - 1]
        }
    };
    let delta_max = match trunc {
        TtTruncation::Epsilon(eps) => eps * t.frobenius_norm() / libm::sqrt((d - 1) as f64),
        _ => 0.0,
    };
    let mut cores = Vec::with_capacity(d);
    let mut ranks = Vec::with_capacity(d - 1);
    let mut discarded = Vec::with_capacity(d - 1);
    let mut r_prev = 1;
    let mut rest = t.clone();
    for k in 0..d - 1 {
        let rows = r_prev * dims[k];
        let cols = rest.len() / rows;
        let mat = rest.reshape(&[rows, cols])?;
        let Svd { u, s, v } = linalg::svd(&mat)?;
        let full = s.len();
        let r = match max_ranks[k] {
            Some(cap) => cap.min(full),
            None => {
                // smallest rank whose tail energy stays within delta_max
                let mut r = full;
                let mut tail = 0.0;
                while r > 1 {
                    let next = tail + s[r - 1] * s[r - 1];
                    if libm::sqrt(next) > delta_max {
                        break;
                    }
                    tail = next;
                    r -= 1;
                }
                r
            }
        };
        let tail: f64 = s[r..].iter().map(|x| x * x).sum();
        discarded.push(libm::sqrt(tail));
        let uk = kernels::narrow(&u, 1, 0, r)?;
        cores.push(uk.reshape(&[r_prev, dims[k], r])?);
        // next remainder: diag(s_r) V_rᵀ, shape [r, cols]
        let vr = kernels::narrow(&v, 1, 0, r)?;
        let mut next = vec![0.0; r * cols];
        for i in 0..r {
            for j in 0..cols {
                next[i * cols + j] = s[i] * vr.data()[j * r + i];
            }
        }
        rest = Tensor::from_vec(&[r, cols], next)?;
        ranks.push(r);
        r_prev = r;
    }
    cores.push(rest.reshape(&[r_prev, dims[d - 1], 1])?);
    let approx = tt_reconstruct(&cores)?;
    let error = approx.sub(t)?.frobenius_norm();
    let bound = libm::sqrt(discarded.iter().map(|x| x * x).sum::<f64>());
    Ok(TtResult { cores, ranks, discarded, bound, error })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSvd {
    /// `[m, R]`.
    pub u: Tensor<f64>,
    pub s: Vec<f64>,
    /// `[n, R]`.
    pub v: Tensor<f64>,
    /// Frobenius norm of `m − U diag(s) Vᵀ`.
    pub error: f64,
    /// `√(Σ_{i>R} σ_i²)` from the computed spectrum.
    pub tail: f64,
}

impl TruncatedSvd {
    pub fn parameter_count(&self) -> usize {
        self.s.len() * (self.u.shape()[0] + self.v.shape()[0])
    }

    pub fn reconstruct(&self) -> Tensor<f64> {
        let (m, r) = (self.u.shape()[0], self.u.shape()[1]);
        let n = self.v.shape()[0];
        let us: Vec<f64> = (0..m * r).map(|idx| self.u.data()[idx] * self.s[idx % r]).collect();
        let mut out = vec![0.0; m * n];
        kernels::gemm_bt(m, r, n, &us, self.v.data(), &mut out);
        Tensor::from_vec(&[m, n], out).expect("shape")
    }
}

/// Best rank-`R` approximation of a matrix.
pub fn truncated_svd(m: &Tensor<f64>, rank: usize) -> Result<TruncatedSvd> {
    let (rows, cols) = kernels::dims2(m, "truncated_svd")?;
    let full = rows.min(cols);
    if rank == 0 || rank > full {
        return Err(Error::InvalidArgument(format!(
            "rank {rank} out of range 1..={full} for a {rows}x{cols} matrix"
        )));
    }
    let Svd { u, s, v } = linalg::svd(m)?;
    let tail = libm::sqrt(s[rank..].iter().map(|x| x * x).sum::<f64>());
    let out = TruncatedSvd {
        u: kernels::narrow(&u, 1, 0, rank)?,
        s: s[..rank].to_vec(),
        v: kernels::narrow(&v, 1, 0, rank)?,
        error: 0.0,
        tail,
    };
    let error = out.reconstruct().sub(m)?.frobenius_norm();
    Ok(TruncatedSvd { error, ..out })
}

/// Factorization method of a report row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cp,
    Tt,
    Svd,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Cp, Method::Tt, Method::Svd];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cp => "cp",
            Method::Tt => "tt",
            Method::Svd => "svd",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizationRow {
    pub layer: String,
    pub method: Method,
    pub rank: usize,
    pub abs_error: f64,
    pub rel_error: f64,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: Method,
    pub rank: usize,
    pub layers: usize,
    pub mean_rel_error: f64,
    /// Population standard deviation over layers.
    pub std_rel_error: f64,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizationReport {
    pub rows: Vec<FactorizationRow>,
    pub aggregates: Vec<Aggregate>,
}

impl FactorizationReport {
    pub fn from_rows(rows: Vec<FactorizationRow>) -> Self {
        let aggregates = aggregate(&rows);
        FactorizationReport { rows, aggregates }
    }

    pub fn aggregate_for(&self, method: Method, rank: usize) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.method == method && a.rank == rank)
    }
}

/// Mean and population std of relative errors, grouped by `(method, rank)`
/// in first-appearance order, summing in row order.
pub fn aggregate(rows: &[FactorizationRow]) -> Vec<Aggregate> {
    let mut keys: Vec<(Method, usize)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.method, r.rank)) {
            keys.push((r.method, r.rank));
        }
    }
    keys.into_iter()
        .map(|(method, rank)| {
            let sel: Vec<&FactorizationRow> = rows.iter().filter(|r| r.method == method && r.rank == rank).collect();
            let n = sel.len() as f64;
            let mean = sel.iter().map(|r| r.rel_error).sum::<f64>() / n;
            let var = sel.iter().map(|r| (r.rel_error - mean) * (r.rel_error - mean)).sum::<f64>() / n;
            Aggregate {
                method,
                rank,
                layers: sel.len(),
                mean_rel_error: mean,
                std_rel_error: libm::sqrt(var),
                params: sel.iter().map(|r| r.params).sum(),
            }
        })
        .collect()
}

/// `[k², C_in, C_out]` view of a delta (3-D deltas pass through).
pub fn delta_cube(delta: &Tensor<f64>) -> Result<Tensor<f64>> {
    match delta.ndim() {
        4 => conv_weight_as_cube(delta),
        3 => Ok(delta.clone()),
        _ => Err(shape_err("factorize", format!("expected a 3-D or 4-D delta, got {:?}", delta.shape()))),
    }
}

/// `[D₁·D₂, D₃]` unfolding of the cube used by the matrix SVD.
pub fn delta_matrix(delta: &Tensor<f64>) -> Result<Tensor<f64>> {
    let cube = delta_cube(delta)?;
    let s = cube.shape();
    cube.reshape(&[s[0] * s[1], s[2]])
}

/// Runs CP, TT and SVD on every delta at every rank. SVD ranks above the
/// matrix limit are capped; CP ranks are swept in ascending order with warm
/// starts.
pub fn factorize_deltas(deltas: &DeltaSet, ranks: &[usize], methods: &[Method], opts: &CpAlsOptions) -> Result<FactorizationReport> {
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.first() == Some(&0) {
        return Err(Error::InvalidArgument("ranks must be positive".into()));
    }
    let mut rows = Vec::new();
    for &method in methods {
        for (name, delta) in &deltas.layers {
            let cube = delta_cube(delta)?;
            let norm = cube.frobenius_norm();
            let rel = |abs: f64| if norm > 0.0 { abs / norm } else { 0.0 };
            let mut warm: Option<CpAdapter<f64>> = None;
            for &rank in &sorted {
                let (abs, params) = match method {
                    Method::Cp => {
                        let res = cp_als_warm(&cube, rank, opts, warm.as_ref())?;
                        let abs = res.rel_error * norm;
                        let p = res.adapter.parameter_count();
                        warm = Some(res.adapter);
                        (abs, p)
                    }
                    Method::Tt => {
                        let res = tt_svd(&cube, &TtTruncation::Uniform(rank))?;
                        (res.error, res.parameter_count())
                    }
                    Method::Svd => {
                        let m = delta_matrix(delta)?;
                        let cap = rank.min(m.shape()[0].min(m.shape()[1]));
                        let res = truncated_svd(&m, cap)?;
                        (res.error, res.parameter_count())
                    }
                };
                rows.push(FactorizationRow {
                    layer: name.clone(),
                    method,
                    rank,
                    abs_error: abs,
                    rel_error: rel(abs),
                    params,
                });
            }
        }
    }
    Ok(FactorizationReport::from_rows(rows))
}

/// `‖reconstruct(adapter)‖_F` for every adapter of a task.
pub fn layer_norms<T: Scalar>(task: &TaskAdapterSet<T>) -> Vec<(AdapterTarget, f64)> {
    task.adapters
        .iter()
        .map(|(t, a)| (t.clone(), a.reconstruct().cast::<f64>().frobenius_norm()))
        .collect()
}

/// Zeroes every adapter whose delta norm is below `threshold`. The input is
/// left untouched.
pub fn prune_by_norm<T: Scalar>(task: &TaskAdapterSet<T>, threshold: f64) -> (TaskAdapterSet<T>, Vec<AdapterTarget>) {
    let mut out = task.clone();
    let mut removed = Vec::new();
    for (target, adapter) in &mut out.adapters {
        let norm = adapter.reconstruct().cast::<f64>().frobenius_norm();
        if norm < threshold {
            adapter.clear();
            removed.push(target.clone());
        }
    }
    (out, removed)
}

/// `count` equally spaced values from `min` to `max` inclusive.
pub fn threshold_sweep(min: f64, max: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![min],
        _ => (0..count).map(|i| min + (max - min) * i as f64 / (count - 1) as f64).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    #[test]
    fn diag_rank_two_error_is_one() {
        let m = Tensor::from_vec(&[3, 3], vec![3.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let r = truncated_svd(&m, 2).unwrap();
        assert!((r.error - 1.0).abs() < 1e-14);
        assert!(truncated_svd(&m, 3).unwrap().error < 1e-14);
        assert!(truncated_svd(&m, 0).is_err());
        assert!(truncated_svd(&m, 4).is_err());
    }

    #[test]
    fn zero_tensor_cp() {
        let z = Tensor::<f64>::zeros(&[2, 3, 4]);
        let r = cp_als(&z, 3, &CpAlsOptions::default()).unwrap();
        assert_eq!(r.rel_error, 0.0);
        assert!(r.adapter.is_zero());
        assert!(cp_als(&z, 0, &CpAlsOptions::default()).is_err());
    }

    #[test]
    fn tt_full_rank_is_exact() {
        let t = Tensor::from_fn(&[3, 4, 5], |i| libm::cos(i as f64 * 0.37));
        let r = tt_svd(&t, &TtTruncation::Uniform(100)).unwrap();
        assert!(r.error < 1e-10, "{}", r.error);
        assert_eq!(r.ranks, vec![3, 5]);
        let e = tt_svd(&t, &TtTruncation::Epsilon(0.0)).unwrap();
        assert!(e.error < 1e-10);
        assert!(tt_svd(&t, &TtTruncation::Ranks(vec![1])).is_err());
    }

    #[test]
    fn sweep_endpoints() {
        assert_eq!(threshold_sweep(1.0, 3.0, 3), vec![1.0, 2.0, 3.0]);
        assert!(threshold_sweep(0.0, 1.0, 0).is_empty());
    }

    #[test]
    fn delta_names_must_match() {
        let a = vec![("w".to_string(), Tensor::<f32>::ones(&[2]))];
        let b = vec![("v".to_string(), Tensor::<f32>::ones(&[2]))];
        assert!(extract_deltas(&a, &b).is_err());
        let c = vec![("w".to_string(), Tensor::<f32>::ones(&[3]))];
        assert!(extract_deltas(&a, &c).is_err());
        let same = extract_deltas(&a, &a).unwrap();
        assert!(same.layers[0].1.data().iter().all(|&v| v == 0.0));
    }
}

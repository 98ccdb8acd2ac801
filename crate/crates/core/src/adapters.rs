//! CP rank-`R` weight deltas.
//!
//! An adapter stores three factor matrices of shape `[R, D_m]`; row `r` of
//! mode `m` is the vector `w^r_m`. The delta it represents is
//!
//! ```text
//! ΔW[i, j, l] = scale · Σ_r w^r_1[i] · w^r_2[j] · w^r_3[l]
//! ```
//!
//! Convolution weights `[C_out, C_in, k, k]` are viewed as `[k², C_in, C_out]`
//! by flattening `(kh, kw)` row-major into `s = kh·k + kw` and moving `C_out`
//! last: `ΔW4[co, ci, kh, kw] = ΔW3[kh·k + kw, ci, co]`. Attention weights are
//! used directly as `[d_model, d, n]`.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which weight an adapter modifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    ConvWeight,
    AttnQuery,
    AttnValue,
    AttnOutput,
}

impl TargetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetKind::ConvWeight => "conv",
            TargetKind::AttnQuery => "query",
            TargetKind::AttnValue => "value",
            TargetKind::AttnOutput => "output",
        }
    }
}

/// A weight tensor that receives a delta: its kind, layer index and the shape
/// of the stored weight.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AdapterTarget {
    pub layer: usize,
    pub kind: TargetKind,
    pub shape: Vec<usize>,
}

impl AdapterTarget {
    pub fn conv(layer: usize, c_out: usize, c_in: usize, k: usize) -> Self {
        AdapterTarget { layer, kind: TargetKind::ConvWeight, shape: alloc::vec![c_out, c_in, k, k] }
    }

    pub fn attention(layer: usize, kind: TargetKind, d_model: usize, heads: usize) -> Result<Self> {
        if kind == TargetKind::ConvWeight {
            return Err(Error::InvalidArgument("attention target cannot be a conv weight".into()));
        }
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(AdapterTarget { layer, kind, shape: alloc::vec![d_model, d_model / heads, heads] })
    }

    /// `(D₁, D₂, D₃)` of the factor modes.
    pub fn adapter_dims(&self) -> Result<[usize; 3]> {
        match (self.kind, self.shape.as_slice()) {
            (TargetKind::ConvWeight, &[c_out, c_in, k, k2]) if k == k2 => Ok([k * k, c_in, c_out]),
            (TargetKind::ConvWeight, s) => Err(shape_err(
                "adapter target",
                format!("conv weight must be [C_out,C_in,k,k], got {s:?}"),
            )),
            (_, &[dm, d, n]) if d * n == dm => Ok([dm, d, n]),
            (_, s) => Err(shape_err(
                "adapter target",
                format!("attention weight must be [d_model,d,n] with d·n = d_model, got {s:?}"),
            )),
        }
    }
}

/// `R` triplets of mode vectors plus a scale on the reconstructed tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct CpAdapter<T> {
    factors: [Tensor<T>; 3],
    scale: T,
}

impl<T: Scalar> CpAdapter<T> {
    /// Factor matrices `[R, D_m]`, one rank-1 term per row.
    pub fn new(factors: [Tensor<T>; 3], scale: T) -> Result<Self> {
        let mut rank = None;
        for (m, f) in factors.iter().enumerate() {
            let (r, _) = kernels::dims2(f, "cp adapter")?;
            if *rank.get_or_insert(r) != r {
                return Err(shape_err(
                    "cp adapter",
                    format!("mode {} has {r} vectors, expected {}", m + 1, rank.unwrap()),
                ));
            }
        }
        Ok(CpAdapter { factors, scale })
    }

    /// Builds an adapter from per-term vectors: `modes[m][r]` is `w^r_{m+1}`.
    pub fn from_vectors(modes: [Vec<Vec<T>>; 3], scale: T) -> Result<Self> {
        let mut factors = Vec::with_capacity(3);
        for (m, vectors) in modes.into_iter().enumerate() {
            let r = vectors.len();
            let d = vectors.first().map_or(0, |v| v.len());
            if r == 0 || d == 0 {
                return Err(Error::InvalidArgument(format!("mode {} has no entries", m + 1)));
            }
            if let Some(bad) = vectors.iter().position(|v| v.len() != d) {
                return Err(shape_err(
                    "cp adapter",
                    format!("mode {} vector {bad} has length {}, expected {d}", m + 1, vectors[bad].len()),
                ));
            }
            factors.push(Tensor::from_vec(&[r, d], vectors.concat())?);
        }
        let [a, b, c]: [Tensor<T>; 3] = factors.try_into().expect("three modes");
        Self::new([a, b, c], scale)
    }

    pub fn zeros(dims: [usize; 3], rank: usize, scale: T) -> Result<Self> {
        check_rank(rank)?;
        check_dims(dims)?;
        Ok(CpAdapter { factors: dims.map(|d| Tensor::zeros(&[rank, d])), scale })
    }

    pub fn rank(&self) -> usize {
        self.factors[0].shape()[0]
    }

    pub fn dims(&self) -> [usize; 3] {
        [0, 1, 2].map(|m| self.factors[m].shape()[1])
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn factor_matrices(&self) -> &[Tensor<T>; 3] {
        &self.factors
    }

    pub fn factor_matrices_mut(&mut self) -> &mut [Tensor<T>; 3] {
        &mut self.factors
    }

    /// `w^r_{mode+1}` for `mode ∈ {0, 1, 2}`.
    pub fn factor(&self, mode: usize, r: usize) -> &[T] {
        let d = self.factors[mode].shape()[1];
        &self.factors[mode].data()[r * d..(r + 1) * d]
    }

    /// Number of trainable scalars: `R·(D₁ + D₂ + D₃)`.
    pub fn parameter_count(&self) -> usize {
        self.rank() * self.dims().iter().sum::<usize>()
    }

    pub fn is_zero(&self) -> bool {
        self.factors.iter().all(|f| f.data().iter().all(|v| v.is_zero()))
    }

    /// In-place zeroing of all factors.
    pub fn clear(&mut self) {
        for f in &mut self.factors {
            f.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Dense `ΔW` of shape `[D₁, D₂, D₃]`.
    pub fn reconstruct(&self) -> Tensor<T> {
        kernels::cp_reconstruct(&self.factors[0], &self.factors[1], &self.factors[2], self.scale)
            .expect("validated factors")
    }

    /// Returns `base + ΔW` without touching `base`. Conv bases `[C_out, C_in,
    /// k, k]` use the fixed reshape described in the module docs.
    pub fn apply(&self, base: &Tensor<T>) -> Result<Tensor<T>> {
        let delta = delta_as_weight(&self.reconstruct(), base.shape())?;
        base.add(&delta)
    }
}

fn check_rank(rank: usize) -> Result<()> {
    if rank == 0 {
        return Err(Error::InvalidArgument("adapter rank must be at least 1".into()));
    }
    Ok(())
}

fn check_dims(dims: [usize; 3]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::InvalidArgument(format!("adapter dims must be positive, got {dims:?}")));
    }
    Ok(())
}

/// Xavier-uniform factors for a convolution delta; each factor vector of
/// length `n` is drawn from `U(-√(6/n), √(6/n))`. Scale is one.
pub fn init_conv_adapter<T: Scalar>(dims: [usize; 3], rank: usize, seed: u64) -> Result<CpAdapter<T>> {
    check_rank(rank)?;
    check_dims(dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors = dims.map(|d| {
        let bound = T::lit(libm::sqrt(6.0 / d as f64));
        Tensor::rand_uniform(&[rank, d], bound, &mut rng)
    });
    CpAdapter::new(factors, T::one())
}

/// Standard deviation of the Gaussian used for attention factors.
pub const ATTN_INIT_STD: f64 = 0.05;

/// Default `α` for the query/value placement.
pub const ALPHA_QUERY_VALUE: f64 = 10.0;

/// Default `α` for the output-projection placement.
pub const ALPHA_OUTPUT: f64 = 100.0;

/// Gaussian `N(0, 0.05²)` factors for an attention delta with scale `α/R`.
pub fn init_attn_adapter<T: Scalar>(
    dims: [usize; 3],
    rank: usize,
    alpha: T,
    seed: u64,
) -> Result<CpAdapter<T>> {
    check_rank(rank)?;
    check_dims(dims)?;
    if !(alpha > T::zero()) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = T::lit(ATTN_INIT_STD);
    let factors = dims.map(|d| Tensor::rand_normal(&[rank, d], T::zero(), std, &mut rng));
    CpAdapter::new(factors, alpha / T::lit(rank as f64))
}

/// Reshapes a `[k², C_in, C_out]` delta to a stored weight shape. 3-D weight
/// shapes are returned unchanged.
pub fn delta_as_weight<T: Scalar>(delta: &Tensor<T>, weight_shape: &[usize]) -> Result<Tensor<T>> {
    match (delta.shape(), weight_shape) {
        (&[s, ci, co], &[wco, wci, k, k2]) => {
            if k != k2 || s != k * k || ci != wci || co != wco {
                return Err(shape_err(
                    "apply adapter",
                    format!("delta {:?} does not fit conv weight {weight_shape:?}", delta.shape()),
                ));
            }
            kernels::permute(delta, &[2, 1, 0])?.reshape(weight_shape)
        }
        (d, w) if d == w => Ok(delta.clone()),
        (d, w) => Err(shape_err("apply adapter", format!("delta {d:?} vs weight {w:?}"))),
    }
}

/// Inverse of [`delta_as_weight`]: `[C_out, C_in, k, k]` to `[k², C_in, C_out]`.
pub fn conv_weight_as_cube<T: Scalar>(w: &Tensor<T>) -> Result<Tensor<T>> {
    let &[co, ci, k, k2] = w.shape() else {
        return Err(shape_err("conv reshape", format!("expected 4-D weight, got {:?}", w.shape())));
    };
    if k != k2 {
        return Err(shape_err("conv reshape", format!("kernel {k}x{k2} is not square")));
    }
    kernels::permute(&w.reshape(&[co, ci, k * k])?, &[2, 1, 0])
}

/// Graph handles for an adapter's factors.
#[derive(Debug, Clone, Copy)]
pub struct CpVars<T> {
    pub modes: [Var; 3],
    pub scale: T,
}

impl<T: Scalar> CpVars<T> {
    pub fn bind(g: &mut Graph<T>, adapter: &CpAdapter<T>, trainable: bool) -> Self {
        let modes = [0, 1, 2].map(|m| {
            let f = adapter.factors[m].clone();
            if trainable {
                g.param(f)
            } else {
                g.constant(f)
            }
        });
        CpVars { modes, scale: adapter.scale }
    }

    pub fn reconstruct(&self, g: &mut Graph<T>) -> Result<Var> {
        g.cp_reconstruct(self.modes, self.scale)
    }

    /// `base + ΔW` on the graph; gradients flow into the factors only when
    /// `base` is a constant.
    pub fn apply(&self, g: &mut Graph<T>, base: Var) -> Result<Var> {
        let delta = self.reconstruct(g)?;
        let shape = g.value(base).shape().to_vec();
        let delta = match (g.value(delta).shape(), shape.as_slice()) {
            (&[s, ci, co], &[wco, wci, k, k2]) => {
                if k != k2 || s != k * k || ci != wci || co != wco {
                    return Err(shape_err(
                        "apply adapter",
                        format!("delta {:?} does not fit conv weight {shape:?}", g.value(delta).shape()),
                    ));
                }
                let p = g.permute(delta, &[2, 1, 0])?;
                g.reshape(p, &shape)?
            }
            _ => delta,
        };
        g.add(base, delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn basis(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn basis_outer_product() {
        let a = CpAdapter::from_vectors(
            [vec![basis(4, 2)], vec![basis(3, 1)], vec![basis(5, 3)]],
            1.0,
        )
        .unwrap();
        let t = a.reconstruct();
        assert_eq!(t.shape(), &[4, 3, 5]);
        assert_eq!(t.sum(), 1.0);
        assert_eq!(t.get(&[2, 1, 3]), Some(1.0));
    }

    #[test]
    fn superposition_of_ones() {
        let ones = |d| vec![vec![1.0f64; d], vec![1.0; d]];
        let a = CpAdapter::from_vectors([ones(2), ones(3), ones(4)], 1.0).unwrap();
        assert!(a.reconstruct().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn ragged_vectors_rejected() {
        let r = CpAdapter::<f64>::from_vectors(
            [vec![vec![1.0; 3], vec![1.0; 2]], vec![vec![1.0; 2]; 2], vec![vec![1.0; 2]; 2]],
            1.0,
        );
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
        let r = CpAdapter::<f64>::from_vectors(
            [vec![vec![1.0; 3]; 2], vec![vec![1.0; 2]; 1], vec![vec![1.0; 2]; 2]],
            1.0,
        );
        assert!(r.is_err());
    }

    #[test]
    fn zero_rank_rejected() {
        assert!(init_conv_adapter::<f32>([9, 4, 4], 0, 1).is_err());
        assert!(init_attn_adapter::<f32>([8, 4, 2], 0, 10.0, 1).is_err());
        assert!(init_attn_adapter::<f32>([8, 4, 2], 2, 0.0, 1).is_err());
        assert!(init_attn_adapter::<f32>([8, 4, 2], 2, -1.0, 1).is_err());
    }

    #[test]
    fn attn_scale_is_alpha_over_rank() {
        let a = init_attn_adapter::<f64>([768, 64, 12], 4, ALPHA_OUTPUT, 3).unwrap();
        assert_eq!(a.scale(), 25.0);
        let q = init_attn_adapter::<f64>([768, 64, 12], 4, ALPHA_QUERY_VALUE, 3).unwrap();
        assert_eq!(q.scale(), 2.5);
    }

    #[test]
    fn conv_init_within_xavier_bounds() {
        let a = init_conv_adapter::<f64>([9, 64, 64], 1, 11).unwrap();
        for (m, d) in a.dims().iter().enumerate() {
            let bound = libm::sqrt(6.0 / *d as f64);
            assert!(a.factor(m, 0).iter().all(|v| v.abs() < bound));
        }
        assert_eq!(a.scale(), 1.0);
        assert_eq!(a, init_conv_adapter::<f64>([9, 64, 64], 1, 11).unwrap());
    }

    #[test]
    fn conv_reshape_roundtrip() {
        let w = Tensor::<f64>::from_fn(&[5, 3, 2, 2], |i| i as f64);
        let cube = conv_weight_as_cube(&w).unwrap();
        assert_eq!(cube.shape(), &[4, 3, 5]);
        // ΔW4[co, ci, kh, kw] = ΔW3[kh·k + kw, ci, co]
        assert_eq!(cube.get(&[2 + 1, 2, 4]), w.get(&[4, 2, 1, 1]));
        assert_eq!(delta_as_weight(&cube, w.shape()).unwrap(), w);
    }

    #[test]
    fn apply_rejects_wrong_shape() {
        let a = CpAdapter::<f64>::zeros([9, 4, 8], 2, 1.0).unwrap();
        assert!(a.apply(&Tensor::zeros(&[8, 4, 3, 3])).is_ok());
        assert!(a.apply(&Tensor::zeros(&[4, 8, 3, 3])).is_err());
        assert!(a.apply(&Tensor::zeros(&[8, 4, 2, 2])).is_err());
    }
}

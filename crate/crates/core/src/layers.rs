//! Task-conditioned network layers and model assembly.
//!
//! The executable model is a chain of `conv → BN → ReLU` blocks, optionally
//! followed by residual self-attention over the spatial tokens, then global
//! mean pooling and a per-task linear head. For task `t` every adaptable conv
//! uses `W_l + ΔW_{l,t}` and every batch norm uses the task's own `Γ_t, β_t`
//! and running statistics. Backbone tensors are only ever read.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{self, AdapterTarget, CpAdapter, CpVars, TargetKind};
use crate::autodiff::{BatchStats, Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::spec::{BackboneSpec, LayerSpec};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    Train,
    Eval,
}

/// Where attention deltas go.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnVariant {
    /// Separate deltas on `W^Q` and `W^V`.
    QueryValue,
    /// A single delta on `W_o`.
    Output,
}

impl AttnVariant {
    pub fn default_alpha(self) -> f64 {
        match self {
            AttnVariant::QueryValue => adapters::ALPHA_QUERY_VALUE,
            AttnVariant::Output => adapters::ALPHA_OUTPUT,
        }
    }
}

/// Derives an independent stream seed.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-channel affine parameters and running moments.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Scalar> BatchNormParams<T> {
    /// `Γ = 1, β = 0`, running moments `(0, 1)`.
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: T::lit(BN_EPS),
            momentum: T::lit(BN_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (name, t) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.shape() != [c] {
                return Err(shape_err("batchnorm", format!("{name} has shape {:?}, expected [{c}]", t.shape())));
            }
        }
        if self.running_var.data().iter().any(|&v| v < T::zero()) {
            return Err(Error::InvalidArgument("running variance must be non-negative".into()));
        }
        if !(self.eps > T::zero()) {
            return Err(Error::InvalidArgument("batch-norm epsilon must be positive".into()));
        }
        if !(self.momentum > T::zero() && self.momentum < T::one()) {
            return Err(Error::InvalidArgument("batch-norm momentum must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Exponential moving average toward the batch moments.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = self.momentum;
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b;
        }
    }

    pub fn parameter_count(&self) -> usize {
        2 * self.channels()
    }
}

/// Attention projections, each stored as `[d_model, d, n]`.
///
/// Head `i` projects with `W^Q[:, :, i]` (a `[d_model, d]` matrix). The
/// output projection maps `Concat(H_1..H_n)` to `d_model` with
/// `out[s, m] = Σ_{i,j} H_i[s, j] · W_o[m, j, i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MhsaWeights<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

impl<T: Scalar> MhsaWeights<T> {
    pub fn init(d_model: usize, heads: usize, seed: u64) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        let shape = [d_model, d_model / heads, heads];
        let std = T::lit(1.0 / libm::sqrt(d_model as f64));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || Tensor::rand_normal(&shape, T::zero(), std, &mut rng);
        Ok(MhsaWeights { wq: draw(), wk: draw(), wv: draw(), wo: draw() })
    }

    /// `(d_model, d, n)`; errors unless all four projections agree and
    /// `d·n = d_model`.
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        let s = self.wq.shape();
        let &[dm, d, n] = s else {
            return Err(shape_err("mhsa", format!("projection must be [d_model,d,n], got {s:?}")));
        };
        if d * n != dm {
            return Err(Error::Config(format!("d·n = {}·{} ≠ d_model = {dm}", d, n)));
        }
        for w in [&self.wk, &self.wv, &self.wo] {
            if w.shape() != s {
                return Err(shape_err("mhsa", format!("projection shapes differ: {s:?} vs {:?}", w.shape())));
            }
        }
        Ok((dm, d, n))
    }

    pub fn parameter_count(&self) -> usize {
        4 * self.wq.len()
    }
}

/// Per-task classifier `logits = features · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Head<T> {
    pub fn init(features: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = T::lit(1.0 / libm::sqrt(features as f64));
        Head {
            weight: Tensor::rand_uniform(&[features, classes], bound, &mut rng),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackboneLayer<T> {
    Conv { weight: Tensor<T>, bn: Option<BatchNormParams<T>> },
    Attention(MhsaWeights<T>),
}

/// Shared weights for every layer of a spec.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    pub spec: BackboneSpec,
    pub layers: Vec<BackboneLayer<T>>,
}

impl<T: Scalar> Backbone<T> {
    /// He-normal conv weights, scaled-normal attention projections, default
    /// batch norms.
    pub fn init(spec: &BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate_executable()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (l, layer) in spec.layers.iter().enumerate() {
            let s = mix_seed(seed, l as u64);
            layers.push(match layer {
                LayerSpec::Conv(c) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(s);
                    let std = T::lit(libm::sqrt(2.0 / (c.c_in * c.k * c.k) as f64));
                    BackboneLayer::Conv {
                        weight: Tensor::rand_normal(&[c.c_out, c.c_in, c.k, c.k], T::zero(), std, &mut rng),
                        bn: c.batch_norm.then(|| BatchNormParams::new(c.c_out)),
                    }
                }
                LayerSpec::Attention(a) => BackboneLayer::Attention(MhsaWeights::init(a.d_model, a.heads, s)?),
            });
        }
        Ok(Backbone { spec: spec.clone(), layers })
    }

    /// Checks that stored tensors match the spec.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate_executable()?;
        if self.layers.len() != self.spec.layers.len() {
            return Err(Error::InvalidSpec(format!(
                "backbone has {} layers, spec declares {}",
                self.layers.len(),
                self.spec.layers.len()
            )));
        }
        for (l, (layer, ls)) in self.layers.iter().zip(&self.spec.layers).enumerate() {
            match (layer, ls) {
                (BackboneLayer::Conv { weight, bn }, LayerSpec::Conv(c)) => {
                    if weight.shape() != [c.c_out, c.c_in, c.k, c.k] {
                        return Err(shape_err("backbone", format!("layer {l}: weight {:?}", weight.shape())));
                    }
                    match bn {
                        Some(p) if c.batch_norm && p.channels() == c.c_out => p.validate()?,
                        None if !c.batch_norm => {}
                        _ => return Err(shape_err("backbone", format!("layer {l}: batch norm mismatch"))),
                    }
                }
                (BackboneLayer::Attention(w), LayerSpec::Attention(a)) => {
                    if w.dims()? != (a.d_model, a.head_dim(), a.heads) {
                        return Err(shape_err("backbone", format!("layer {l}: attention dims")));
                    }
                }
                _ => return Err(Error::InvalidSpec(format!("layer {l}: kind differs from spec"))),
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                BackboneLayer::Conv { weight, .. } => weight.len(),
                BackboneLayer::Attention(w) => w.parameter_count(),
            })
            .sum()
    }

    pub fn conv_weight(&self, l: usize) -> Option<&Tensor<T>> {
        match self.layers.get(l) {
            Some(BackboneLayer::Conv { weight, .. }) => Some(weight),
            _ => None,
        }
    }

    pub fn conv_weight_mut(&mut self, l: usize) -> Option<&mut Tensor<T>> {
        match self.layers.get_mut(l) {
            Some(BackboneLayer::Conv { weight, .. }) => Some(weight),
            _ => None,
        }
    }

    pub fn bn(&self, l: usize) -> Option<&BatchNormParams<T>> {
        match self.layers.get(l) {
            Some(BackboneLayer::Conv { bn, .. }) => bn.as_ref(),
            _ => None,
        }
    }
}

/// Options for building a task's adapters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterOptions {
    /// Zero means no deltas (batch norm and head only).
    pub rank: usize,
    pub attn_variant: AttnVariant,
    /// `None` uses the variant's default `α`.
    pub alpha: Option<f64>,
    pub seed: u64,
}

impl AdapterOptions {
    pub fn conv(rank: usize, seed: u64) -> Self {
        AdapterOptions { rank, attn_variant: AttnVariant::Output, alpha: None, seed }
    }
}

/// The trainable state of one task: deltas, batch norms and head.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskAdapterSet<T> {
    pub id: String,
    pub adapters: Vec<(AdapterTarget, CpAdapter<T>)>,
    /// Indexed by layer; `Some` exactly for convs followed by a batch norm.
    pub bn: Vec<Option<BatchNormParams<T>>>,
    pub head: Head<T>,
}

impl<T: Scalar> TaskAdapterSet<T> {
    /// Adapter targets a task on `spec` carries under `opts`.
    pub fn targets(spec: &BackboneSpec, variant: AttnVariant) -> Result<Vec<AdapterTarget>> {
        let mut out = Vec::new();
        for (l, layer) in spec.layers.iter().enumerate() {
            if !spec.is_adaptable(l) {
                continue;
            }
            match layer {
                LayerSpec::Conv(c) => out.push(AdapterTarget::conv(l, c.c_out, c.c_in, c.k)),
                LayerSpec::Attention(a) => match variant {
                    AttnVariant::QueryValue => {
                        out.push(AdapterTarget::attention(l, TargetKind::AttnQuery, a.d_model, a.heads)?);
                        out.push(AdapterTarget::attention(l, TargetKind::AttnValue, a.d_model, a.heads)?);
                    }
                    AttnVariant::Output => {
                        out.push(AdapterTarget::attention(l, TargetKind::AttnOutput, a.d_model, a.heads)?)
                    }
                },
            }
        }
        Ok(out)
    }

    /// Fresh task state on any valid spec, with default batch norms.
    pub fn for_spec(id: &str, spec: &BackboneSpec, classes: usize, opts: AdapterOptions) -> Result<Self> {
        spec.validate()?;
        let features = spec
            .feature_dim()
            .ok_or_else(|| Error::InvalidSpec("spec has no feature-producing layer".into()))?;
        if classes == 0 {
            return Err(Error::InvalidArgument("a task needs at least one class".into()));
        }
        let mut adapters = Vec::new();
        if opts.rank > 0 {
            for (i, target) in Self::targets(spec, opts.attn_variant)?.into_iter().enumerate() {
                let dims = target.adapter_dims()?;
                let seed = mix_seed(opts.seed, 1000 + i as u64);
                let adapter = match target.kind {
                    TargetKind::ConvWeight => adapters::init_conv_adapter(dims, opts.rank, seed)?,
                    _ => {
                        let alpha = opts.alpha.unwrap_or(opts.attn_variant.default_alpha());
                        adapters::init_attn_adapter(dims, opts.rank, T::lit(alpha), seed)?
                    }
                };
                adapters.push((target, adapter));
            }
        }
        let bn = spec
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv(c) if c.batch_norm => Some(BatchNormParams::new(c.c_out)),
                _ => None,
            })
            .collect();
        Ok(TaskAdapterSet {
            id: id.into(),
            adapters,
            bn,
            head: Head::init(features, classes, mix_seed(opts.seed, 7)),
        })
    }

    /// Fresh task state whose batch norms start from the backbone's.
    pub fn new(id: &str, backbone: &Backbone<T>, classes: usize, opts: AdapterOptions) -> Result<Self> {
        let mut set = Self::for_spec(id, &backbone.spec, classes, opts)?;
        set.copy_bn_from(backbone);
        Ok(set)
    }

    pub fn copy_bn_from(&mut self, backbone: &Backbone<T>) {
        for (l, slot) in self.bn.iter_mut().enumerate() {
            if let (Some(dst), Some(src)) = (slot.as_mut(), backbone.bn(l)) {
                *dst = src.clone();
            }
        }
    }

    /// Replaces every factor with zeros (same shapes and scales).
    pub fn zero_factors(&mut self) {
        for (_, a) in &mut self.adapters {
            a.clear();
        }
    }

    pub fn adapter_for(&self, layer: usize, kind: TargetKind) -> Option<&CpAdapter<T>> {
        self.adapters
            .iter()
            .find(|(t, _)| t.layer == layer && t.kind == kind)
            .map(|(_, a)| a)
    }

    pub fn rank(&self) -> usize {
        self.adapters.first().map_or(0, |(_, a)| a.rank())
    }

    pub fn adapter_parameter_count(&self) -> usize {
        self.adapters.iter().map(|(_, a)| a.parameter_count()).sum()
    }

    pub fn bn_parameter_count(&self) -> usize {
        self.bn.iter().flatten().map(|p| p.parameter_count()).sum()
    }

    pub fn head_parameter_count(&self) -> usize {
        self.head.parameter_count()
    }

    /// Checks the set covers exactly the adaptable layers of `backbone`.
    pub fn check_compatible(&self, backbone: &Backbone<T>) -> Result<()> {
        let spec = &backbone.spec;
        if self.bn.len() != spec.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "task `{}` has batch norms for {} layers, backbone has {}",
                self.id,
                self.bn.len(),
                spec.layers.len()
            )));
        }
        for (l, (bn, layer)) in self.bn.iter().zip(&spec.layers).enumerate() {
            let want = match layer {
                LayerSpec::Conv(c) if c.batch_norm => Some(c.c_out),
                _ => None,
            };
            if bn.as_ref().map(|p| p.channels()) != want {
                return Err(shape_err("task batch norm", format!("layer {l}: expected {want:?} channels")));
            }
            if let Some(p) = bn {
                p.validate()?;
            }
        }
        if !self.adapters.is_empty() {
            let variant = if self.adapters.iter().any(|(t, _)| t.kind == TargetKind::AttnQuery) {
                AttnVariant::QueryValue
            } else {
                AttnVariant::Output
            };
            let expected = Self::targets(spec, variant)?;
            let got: Vec<&AdapterTarget> = self.adapters.iter().map(|(t, _)| t).collect();
            if got.len() != expected.len() || got.iter().zip(&expected).any(|(a, b)| *a != b) {
                return Err(Error::InvalidArgument(format!(
                    "task `{}` adapters do not cover the adaptable layers of `{}`",
                    self.id, spec.name
                )));
            }
            for (t, a) in &self.adapters {
                if a.dims() != t.adapter_dims()? {
                    return Err(shape_err("task adapter", format!("layer {}: dims {:?}", t.layer, a.dims())));
                }
            }
        }
        let features = spec.feature_dim().unwrap_or(0);
        if self.head.weight.shape() != [features, self.head.classes()] {
            return Err(shape_err("task head", format!("weight {:?}", self.head.weight.shape())));
        }
        Ok(())
    }

    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats<T>)]) {
        for (l, s) in stats {
            if let Some(Some(p)) = self.bn.get_mut(*l) {
                p.update_running(s);
            }
        }
    }

    /// Mutable access to a trainable tensor.
    pub fn param_mut(&mut self, key: ParamKey) -> Option<&mut Tensor<T>> {
        match key {
            ParamKey::Factor { slot, mode } => {
                self.adapters.get_mut(slot).map(|(_, a)| &mut a.factor_matrices_mut()[mode])
            }
            ParamKey::Gamma(l) => self.bn.get_mut(l)?.as_mut().map(|p| &mut p.gamma),
            ParamKey::Beta(l) => self.bn.get_mut(l)?.as_mut().map(|p| &mut p.beta),
            ParamKey::HeadWeight => Some(&mut self.head.weight),
            ParamKey::HeadBias => Some(&mut self.head.bias),
            ParamKey::BackboneWeight(_) => None,
        }
    }
}

/// Which parameter groups become trainable leaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Trainable {
    pub adapters: bool,
    pub bn: bool,
    pub head: bool,
    /// Conv weights of the backbone itself (full fine-tuning only).
    pub backbone: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable { adapters: false, bn: false, head: false, backbone: false };
    pub const TASK: Trainable = Trainable { adapters: true, bn: true, head: true, backbone: false };
    pub const ALL: Trainable = Trainable { adapters: true, bn: true, head: true, backbone: true };
}

/// Identifies a trainable tensor in a [`TaskAdapterSet`] or [`Backbone`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKey {
    /// Factor matrix `mode` of the adapter at position `slot`.
    Factor { slot: usize, mode: usize },
    Gamma(usize),
    Beta(usize),
    HeadWeight,
    HeadBias,
    BackboneWeight(usize),
}

pub struct ForwardOutput<T> {
    pub logits: Var,
    /// Trainable leaves in a fixed order.
    pub params: Vec<(ParamKey, Var)>,
    /// Batch moments of each train-mode batch norm, by layer.
    pub batch_stats: Vec<(usize, BatchStats<T>)>,
}

/// Graph handles for one layer's projections.
#[derive(Debug, Clone, Copy)]
pub struct MhsaVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

impl MhsaVars {
    pub fn constant<T: Scalar>(g: &mut Graph<T>, w: &MhsaWeights<T>) -> Self {
        MhsaVars {
            wq: g.constant(w.wq.clone()),
            wk: g.constant(w.wk.clone()),
            wv: g.constant(w.wv.clone()),
            wo: g.constant(w.wo.clone()),
        }
    }
}

/// Multi-head self-attention over `x [S, d_model]` with `Q = K = V = x`.
///
/// Per head `H_i = softmax((x W_i^Q)(x W_i^K)ᵀ / √d) (x W_i^V)`; the heads
/// are concatenated and projected by `W_o`. At most one adapter placement may
/// be active.
pub fn mhsa_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: &MhsaVars,
    qv_adapters: Option<(&CpVars<T>, &CpVars<T>)>,
    o_adapter: Option<&CpVars<T>>,
) -> Result<Var> {
    if qv_adapters.is_some() && o_adapter.is_some() {
        return Err(Error::Config("query/value and output adapters cannot be combined".into()));
    }
    let &[dm, d, n] = g.value(w.wq).shape() else {
        return Err(shape_err("mhsa", format!("projection must be [d_model,d,n], got {:?}", g.value(w.wq).shape())));
    };
    if d * n != dm {
        return Err(Error::Config(format!("d·n = {d}·{n} ≠ d_model = {dm}")));
    }
    for v in [w.wk, w.wv, w.wo] {
        if g.value(v).shape() != [dm, d, n] {
            return Err(shape_err("mhsa", format!("projection shapes differ: {:?}", g.value(v).shape())));
        }
    }
    let xs = g.value(x).shape();
    if xs.len() != 2 || xs[1] != dm {
        return Err(shape_err("mhsa", format!("input must be [S, {dm}], got {xs:?}")));
    }
    let (mut wq, wk, mut wv, mut wo) = (w.wq, w.wk, w.wv, w.wo);
    if let Some((aq, av)) = qv_adapters {
        wq = aq.apply(g, wq)?;
        wv = av.apply(g, wv)?;
    }
    if let Some(ao) = o_adapter {
        wo = ao.apply(g, wo)?;
    }
    // [d_model, d, n] -> [n, d_model, d] so each head is a contiguous slice.
    let per_head = |g: &mut Graph<T>, wt: Var| g.permute(wt, &[2, 0, 1]);
    let (wq, wk, wv) = (per_head(g, wq)?, per_head(g, wk)?, per_head(g, wv)?);
    let inv_sqrt_d = T::one() / T::lit(d as f64).sqrt();
    let mut heads = Vec::with_capacity(n);
    for i in 0..n {
        let mut proj = |wt: Var| -> Result<Var> {
            let s = g.narrow(wt, 0, i, 1)?;
            let s = g.reshape(s, &[dm, d])?;
            g.matmul(x, s)
        };
        let (q, k, v) = (proj(wq)?, proj(wk)?, proj(wv)?);
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, inv_sqrt_d);
        let attn = g.softmax(scores, 1)?;
        heads.push(g.matmul(attn, v)?);
    }
    let cat = g.concat(&heads, 1)?;
    // W_o[m, j, i] -> rows indexed by i·d + j.
    let wo = g.permute(wo, &[2, 1, 0])?;
    let wo = g.reshape(wo, &[n * d, dm])?;
    g.matmul(cat, wo)
}

/// `BN_{Γ,β}(conv(W + ΔW, y))` on the graph.
#[allow(clippy::too_many_arguments)]
pub fn adapted_conv_block_var<T: Scalar>(
    g: &mut Graph<T>,
    y: Var,
    weight: Var,
    adapter: Option<&CpVars<T>>,
    gamma: Var,
    beta: Var,
    bn: &BatchNormParams<T>,
    stride: usize,
    padding: usize,
    mode: BnMode,
) -> Result<(Var, Option<BatchStats<T>>)> {
    let w = match adapter {
        Some(a) => a.apply(g, weight)?,
        None => weight,
    };
    let z = g.conv2d(y, w, stride, padding)?;
    match mode {
        BnMode::Train => {
            let (out, stats) = g.batch_norm_train(z, gamma, beta, bn.eps)?;
            Ok((out, Some(stats)))
        }
        BnMode::Eval => {
            let out = g.batch_norm_eval(
                z,
                gamma,
                beta,
                bn.running_mean.data(),
                bn.running_var.data(),
                bn.eps,
            )?;
            Ok((out, None))
        }
    }
}

struct LayerView<'a, T> {
    adapters: &'a [(AdapterTarget, CpAdapter<T>)],
    bn: &'a [Option<BatchNormParams<T>>],
    head: &'a Head<T>,
}

fn leaf<T: Scalar>(
    g: &mut Graph<T>,
    t: &Tensor<T>,
    trainable: bool,
    key: ParamKey,
    params: &mut Vec<(ParamKey, Var)>,
) -> Var {
    if trainable {
        let v = g.param(t.clone());
        params.push((key, v));
        v
    } else {
        g.constant(t.clone())
    }
}

fn forward_impl<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    backbone: &Backbone<T>,
    view: LayerView<'_, T>,
    mode: BnMode,
    trainable: Trainable,
) -> Result<ForwardOutput<T>> {
    let spec = &backbone.spec;
    let want = &spec.input;
    let xs = g.value(x).shape().to_vec();
    if xs.len() != 4 || xs[1..] != want[..] {
        return Err(shape_err("forward", format!("input {xs:?} does not match [N, {want:?}]")));
    }
    let mut params = Vec::new();
    let mut batch_stats = Vec::new();
    let mut adapter_vars: Vec<CpVars<T>> = Vec::with_capacity(view.adapters.len());
    for (slot, (_, a)) in view.adapters.iter().enumerate() {
        let v = CpVars::bind(g, a, trainable.adapters);
        if trainable.adapters {
            for (mode, &m) in v.modes.iter().enumerate() {
                params.push((ParamKey::Factor { slot, mode }, m));
            }
        }
        adapter_vars.push(v);
    }
    let find = |layer: usize, kind: TargetKind| -> Option<CpVars<T>> {
        view.adapters
            .iter()
            .zip(&adapter_vars)
            .find(|((t, _), _)| t.layer == layer && t.kind == kind)
            .map(|(_, v)| *v)
    };

    let mut h = x;
    let mut tokens: Option<Vec<Var>> = None;
    for (l, (layer, ls)) in backbone.layers.iter().zip(&spec.layers).enumerate() {
        match (layer, ls) {
            (BackboneLayer::Conv { weight, .. }, LayerSpec::Conv(c)) => {
                let w = leaf(g, weight, trainable.backbone, ParamKey::BackboneWeight(l), &mut params);
                let adapter = find(l, TargetKind::ConvWeight);
                match view.bn.get(l).and_then(|b| b.as_ref()) {
                    Some(bn) => {
                        let gamma = leaf(g, &bn.gamma, trainable.bn, ParamKey::Gamma(l), &mut params);
                        let beta = leaf(g, &bn.beta, trainable.bn, ParamKey::Beta(l), &mut params);
                        let (z, stats) = adapted_conv_block_var(
                            g, h, w, adapter.as_ref(), gamma, beta, bn, c.stride, c.padding(), mode,
                        )?;
                        if let Some(s) = stats {
                            batch_stats.push((l, s));
                        }
                        h = z;
                    }
                    None if !c.batch_norm => {
                        let w = match adapter.as_ref() {
                            Some(a) => a.apply(g, w)?,
                            None => w,
                        };
                        h = g.conv2d(h, w, c.stride, c.padding())?;
                    }
                    None => return Err(shape_err("forward", format!("layer {l}: missing batch norm"))),
                }
                h = g.relu(h);
            }
            (BackboneLayer::Attention(weights), LayerSpec::Attention(_)) => {
                let toks = match tokens.take() {
                    Some(t) => t,
                    None => to_tokens(g, h)?,
                };
                let wv = MhsaVars::constant(g, weights);
                let q = find(l, TargetKind::AttnQuery);
                let v = find(l, TargetKind::AttnValue);
                let o = find(l, TargetKind::AttnOutput);
                let qv = match (&q, &v) {
                    (Some(q), Some(v)) => Some((q, v)),
                    (None, None) => None,
                    _ => return Err(Error::Config(format!("layer {l}: query and value adapters must be paired"))),
                };
                let mut next = Vec::with_capacity(toks.len());
                for t in toks {
                    let a = mhsa_forward(g, t, &wv, qv, o.as_ref())?;
                    next.push(g.add(t, a)?);
                }
                tokens = Some(next);
            }
            _ => return Err(Error::InvalidSpec(format!("layer {l}: kind differs from spec"))),
        }
    }
    let features = match tokens {
        Some(toks) => {
            let pooled = toks
                .into_iter()
                .map(|t| g.mean_axis(t, 0))
                .collect::<Result<Vec<_>>>()?;
            g.concat(&pooled, 0)?
        }
        None => {
            let s = g.value(h).shape().to_vec();
            let flat = g.reshape(h, &[s[0], s[1], s[2] * s[3]])?;
            let m = g.mean_axis(flat, 2)?;
            g.reshape(m, &[s[0], s[1]])?
        }
    };
    let hw = leaf(g, &view.head.weight, trainable.head, ParamKey::HeadWeight, &mut params);
    let hb = leaf(g, &view.head.bias, trainable.head, ParamKey::HeadBias, &mut params);
    let z = g.matmul(features, hw)?;
    let logits = g.add_row_bias(z, hb)?;
    Ok(ForwardOutput { logits, params, batch_stats })
}

/// `[N, C, H, W]` to one `[H·W, C]` token matrix per sample.
fn to_tokens<T: Scalar>(g: &mut Graph<T>, h: Var) -> Result<Vec<Var>> {
    let s = g.value(h).shape().to_vec();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let flat = g.reshape(h, &[n, c, hw])?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let one = g.narrow(flat, 0, i, 1)?;
        let one = g.reshape(one, &[c, hw])?;
        out.push(g.transpose(one)?);
    }
    Ok(out)
}

/// Task-conditioned forward pass: backbone weights plus the task's deltas,
/// batch norms and head.
pub fn forward_task<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    backbone: &Backbone<T>,
    task: &TaskAdapterSet<T>,
    mode: BnMode,
    trainable: Trainable,
) -> Result<ForwardOutput<T>> {
    task.check_compatible(backbone)?;
    let view = LayerView { adapters: &task.adapters, bn: &task.bn, head: &task.head };
    forward_impl(g, x, backbone, view, mode, trainable)
}

/// The shared feature extractor: backbone weights and batch norms with the
/// given head, no deltas.
pub fn forward_unadapted<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    backbone: &Backbone<T>,
    head: &Head<T>,
) -> Result<Var> {
    let bn: Vec<Option<BatchNormParams<T>>> =
        (0..backbone.layers.len()).map(|l| backbone.bn(l).cloned()).collect();
    let view = LayerView { adapters: &[], bn: &bn, head };
    Ok(forward_impl(g, x, backbone, view, BnMode::Eval, Trainable::NONE)?.logits)
}

/// Eval-mode logits for a batch `x [N, C, H, W]`.
pub fn infer<T: Scalar>(backbone: &Backbone<T>, task: &TaskAdapterSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = forward_task(&mut g, xv, backbone, task, BnMode::Eval, Trainable::NONE)?;
    Ok(g.value(out.logits).clone())
}

/// Eval-mode logits of the unadapted network.
pub fn infer_unadapted<T: Scalar>(backbone: &Backbone<T>, head: &Head<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let logits = forward_unadapted(&mut g, xv, backbone, head)?;
    Ok(g.value(logits).clone())
}

/// Mean cross-entropy of task logits against `labels`; nothing is updated.
pub fn task_loss<T: Scalar>(
    backbone: &Backbone<T>,
    task: &TaskAdapterSet<T>,
    x: &Tensor<T>,
    labels: &[usize],
    mode: BnMode,
) -> Result<T> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = forward_task(&mut g, xv, backbone, task, mode, Trainable::NONE)?;
    let loss = g.softmax_cross_entropy(out.logits, labels)?;
    Ok(g.value(loss).data()[0])
}

/// Tensor-level batch norm; train mode updates the running moments.
pub fn batchnorm_forward<T: Scalar>(u: &Tensor<T>, p: &mut BatchNormParams<T>, mode: BnMode) -> Result<Tensor<T>> {
    p.validate()?;
    let mut g = Graph::new();
    let x = g.constant(u.clone());
    let gamma = g.constant(p.gamma.clone());
    let beta = g.constant(p.beta.clone());
    let out = match mode {
        BnMode::Train => {
            let (out, stats) = g.batch_norm_train(x, gamma, beta, p.eps)?;
            p.update_running(&stats);
            out
        }
        BnMode::Eval => g.batch_norm_eval(x, gamma, beta, p.running_mean.data(), p.running_var.data(), p.eps)?,
    };
    Ok(g.value(out).clone())
}

/// Tensor-level `BN(conv(W + ΔW, y))`.
pub fn adapted_conv_block<T: Scalar>(
    y: &Tensor<T>,
    weight: &Tensor<T>,
    adapter: Option<&CpAdapter<T>>,
    bn: &mut BatchNormParams<T>,
    stride: usize,
    padding: usize,
    mode: BnMode,
) -> Result<Tensor<T>> {
    bn.validate()?;
    let mut g = Graph::new();
    let yv = g.constant(y.clone());
    let wv = g.constant(weight.clone());
    let av = adapter.map(|a| CpVars::bind(&mut g, a, false));
    let gamma = g.constant(bn.gamma.clone());
    let beta = g.constant(bn.beta.clone());
    let (out, stats) = adapted_conv_block_var(&mut g, yv, wv, av.as_ref(), gamma, beta, bn, stride, padding, mode)?;
    if let Some(s) = stats {
        bn.update_running(&s);
    }
    Ok(g.value(out).clone())
}

/// Tensor-level [`mhsa_forward`].
pub fn mhsa<T: Scalar>(
    x: &Tensor<T>,
    w: &MhsaWeights<T>,
    qv_adapters: Option<(&CpAdapter<T>, &CpAdapter<T>)>,
    o_adapter: Option<&CpAdapter<T>>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = MhsaVars::constant(&mut g, w);
    let qv = qv_adapters.map(|(q, v)| (CpVars::bind(&mut g, q, false), CpVars::bind(&mut g, v, false)));
    let o = o_adapter.map(|a| CpVars::bind(&mut g, a, false));
    let out = mhsa_forward(&mut g, xv, &wv, qv.as_ref().map(|(q, v)| (q, v)), o.as_ref())?;
    Ok(g.value(out).clone())
}

/// A frozen backbone with its registered tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub backbone: Backbone<T>,
    pub tasks: Vec<TaskAdapterSet<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(backbone: Backbone<T>) -> Self {
        Model { backbone, tasks: Vec::new() }
    }

    /// Adds a task; ids must be unique and the set must fit the backbone.
    pub fn register(&mut self, task: TaskAdapterSet<T>) -> Result<()> {
        if self.tasks.iter().any(|t| t.id == task.id) {
            return Err(Error::InvalidArgument(format!("task `{}` is already registered", task.id)));
        }
        task.check_compatible(&self.backbone)?;
        self.tasks.push(task);
        Ok(())
    }

    pub fn task(&self, id: &str) -> Result<&TaskAdapterSet<T>> {
        self.tasks.iter().find(|t| t.id == id).ok_or_else(|| Error::UnknownTask(id.into()))
    }

    pub fn task_ids(&self) -> impl Iterator<Item = &str> {
        self.tasks.iter().map(|t| t.id.as_str())
    }

    /// Eval-mode logits of task `id`.
    pub fn logits(&self, id: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
        infer(&self.backbone, self.task(id)?, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::{AttentionSpec, ConvSpec};
    use alloc::vec;

    fn tiny_spec() -> BackboneSpec {
        let conv = |c_in, c_out, adaptable| {
            LayerSpec::Conv(ConvSpec {
                k: 3,
                c_in,
                c_out,
                stride: 1,
                padding: Some(1),
                adaptable,
                shortcut: false,
                batch_norm: true,
            })
        };
        BackboneSpec {
            name: "tiny".into(),
            input: vec![2, 4, 4],
            classes: vec![3],
            layers: vec![
                conv(2, 4, None),
                conv(4, 4, None),
                LayerSpec::Attention(AttentionSpec { d_model: 4, heads: 2, adaptable: true }),
            ],
        }
    }

    #[test]
    fn task_covers_adaptable_layers() {
        let spec = tiny_spec();
        let bb = Backbone::<f64>::init(&spec, 1).unwrap();
        let t = TaskAdapterSet::new("a", &bb, 3, AdapterOptions::conv(2, 5)).unwrap();
        let kinds: Vec<_> = t.adapters.iter().map(|(t, _)| (t.layer, t.kind)).collect();
        assert_eq!(kinds, vec![(1, TargetKind::ConvWeight), (2, TargetKind::AttnOutput)]);
        t.check_compatible(&bb).unwrap();
        let mut bad = t.clone();
        bad.adapters.pop();
        assert!(bad.check_compatible(&bb).is_err());
    }

    #[test]
    fn combined_attention_placements_rejected() {
        let w = MhsaWeights::<f64>::init(4, 2, 0).unwrap();
        let a = CpAdapter::zeros([4, 2, 2], 1, 1.0).unwrap();
        let x = Tensor::ones(&[3, 4]);
        let err = mhsa(&x, &w, Some((&a, &a)), Some(&a)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn bad_head_split_rejected() {
        assert!(MhsaWeights::<f64>::init(6, 4, 0).is_err());
        let mut w = MhsaWeights::<f64>::init(4, 2, 0).unwrap();
        w.wq = Tensor::zeros(&[4, 3, 2]);
        assert!(matches!(w.dims(), Err(Error::Config(_))));
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let u = Tensor::<f64>::from_fn(&[2, 3, 2, 2], |i| i as f64);
        let mut p = BatchNormParams::new(3);
        batchnorm_forward(&u, &mut p, BnMode::Train).unwrap();
        assert!(p.running_mean.data().iter().all(|&m| m > 0.0));
        let before = p.clone();
        batchnorm_forward(&u, &mut p, BnMode::Eval).unwrap();
        assert_eq!(p, before);
        let mut wrong = BatchNormParams::<f64>::new(2);
        assert!(batchnorm_forward(&u, &mut wrong, BnMode::Eval).is_err());
    }

    #[test]
    fn unknown_shape_input_rejected() {
        let spec = tiny_spec();
        let bb = Backbone::<f64>::init(&spec, 1).unwrap();
        let t = TaskAdapterSet::new("a", &bb, 3, AdapterOptions::conv(1, 5)).unwrap();
        assert!(infer(&bb, &t, &Tensor::zeros(&[1, 3, 4, 4])).is_err());
        assert_eq!(infer(&bb, &t, &Tensor::zeros(&[2, 2, 4, 4])).unwrap().shape(), &[2, 3]);
    }
}

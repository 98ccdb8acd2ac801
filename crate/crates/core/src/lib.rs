//! Factorized tensor network (FTN) adapters.
//!
//! A frozen backbone is specialized to a new task by adding a CP rank-`R`
//! tensor `ΔW = Σ_r a_r ⊗ b_r ⊗ c_r` to each adaptable weight, together with
//! task-specific batch-norm parameters and a classification head. This crate
//! holds the pure numerical pieces:
//!
//! * [`tensor`], [`kernels`] and [`autodiff`]: dense tensors and a tape-based
//!   reverse-mode engine with the primitives the model needs.
//! * [`adapters`]: CP factor storage, initialization, reconstruction.
//! * [`layers`]: batch norm, adapted convolution, multi-head self-attention
//!   and whole-model assembly.
//! * [`spec`] and [`budget`]: declarative backbone descriptions and exact
//!   parameter accounting.
//! * [`linalg`] and [`factorize`]: SVD, CP-ALS, TT-SVD and norm pruning of
//!   weight deltas.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]
// `!(x > 0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![deny(rust_2018_idioms)]

extern crate alloc;

pub mod adapters;
pub mod autodiff;
pub mod budget;
mod error;
pub mod factorize;
pub mod kernels;
pub mod layers;
pub mod linalg;
mod scalar;
pub mod spec;
pub mod tensor;

pub use crate::adapters::{AdapterTarget, CpAdapter, TargetKind};
pub use crate::autodiff::{Gradients, Graph, Var};
pub use crate::error::{Error, Result};
pub use crate::layers::{
    Backbone, Model, BackboneLayer, BatchNormParams, BnMode, Head, MhsaWeights, TaskAdapterSet,
};
pub use crate::scalar::{Precision, Scalar};
pub use crate::spec::{AttentionSpec, BackboneSpec, ConvSpec, LayerSpec};
pub use crate::tensor::Tensor;

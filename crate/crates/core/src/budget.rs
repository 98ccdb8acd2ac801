//! Exact parameter accounting for FTN and the comparison methods.
//!
//! Conv layers contribute `k²·C_in·C_out` frozen weights and, when adaptable,
//! `R·(k² + C_in + C_out)` per-task factor entries. Attention layers
//! contribute `4·d_model²` frozen weights and `R·(d_model + d + n)` per
//! adapted projection. Each conv's batch norm adds `2·C_out` per task and the
//! head adds `F·K + K` for a task with `K` classes.

use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::AttnVariant;
use crate::spec::{BackboneSpec, LayerSpec};

/// Itemized counts for `tasks` tasks over one backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub spec: String,
    pub tasks: u64,
    pub rank: u64,
    pub frozen_backbone: u64,
    pub adapter_per_task: u64,
    pub bn_per_task: u64,
    /// Sum of head sizes over the `tasks` tasks.
    pub heads_total: u64,
    pub total: u64,
    /// Frozen backbone plus heads only.
    pub feature_extractor_total: u64,
    pub multiplier: f64,
}

impl BudgetReport {
    fn finish(mut self) -> Self {
        self.total = self.frozen_backbone
            + self.tasks * (self.adapter_per_task + self.bn_per_task)
            + self.heads_total;
        self.feature_extractor_total = self.frozen_backbone + self.heads_total;
        self.multiplier = self.total as f64 / self.feature_extractor_total as f64;
        self
    }
}

fn check_positive(name: &str, v: u64) -> Result<()> {
    if v == 0 {
        return Err(Error::InvalidArgument(format!("{name} must be positive")));
    }
    Ok(())
}

fn heads_total(spec: &BackboneSpec, tasks: u64) -> Result<u64> {
    if spec.classes.is_empty() {
        return Ok(0);
    }
    if tasks as usize > spec.classes.len() {
        return Err(Error::InvalidArgument(format!(
            "{tasks} tasks requested but `{}` declares class counts for {}",
            spec.name,
            spec.classes.len()
        )));
    }
    let f = spec.feature_dim().unwrap_or(0) as u64;
    Ok(spec.classes[..tasks as usize].iter().map(|&k| f * k as u64 + k as u64).sum())
}

/// Counts with attention layers adapted per `variant`; `rank = 0` is the
/// batch-norm-and-head-only configuration.
pub fn ftn_budget(spec: &BackboneSpec, tasks: u64, rank: u64, variant: AttnVariant) -> Result<BudgetReport> {
    spec.validate()?;
    check_positive("task count", tasks)?;
    let mut frozen = 0u64;
    let mut adapter = 0u64;
    let mut bn = 0u64;
    for (l, layer) in spec.layers.iter().enumerate() {
        match layer {
            LayerSpec::Conv(c) => {
                frozen += c.weight_count();
                if spec.is_adaptable(l) {
                    adapter += rank * (c.k * c.k + c.c_in + c.c_out) as u64;
                }
                if c.batch_norm {
                    bn += 2 * c.c_out as u64;
                }
            }
            LayerSpec::Attention(a) => {
                frozen += 4 * (a.d_model * a.d_model) as u64;
                if spec.is_adaptable(l) && rank > 0 {
                    adapter += attn_ftn_count(variant, 1, rank, a.d_model as u64, a.heads as u64)?;
                }
            }
        }
    }
    Ok(BudgetReport {
        spec: spec.name.clone(),
        tasks,
        rank,
        frozen_backbone: frozen,
        adapter_per_task: adapter,
        bn_per_task: bn,
        heads_total: heads_total(spec, tasks)?,
        total: 0,
        feature_extractor_total: 0,
        multiplier: 0.0,
    }
    .finish())
}

/// Conv-backbone counts: per adaptable conv `R·(k² + C_in + C_out)` per task.
pub fn conv_ftn_count(spec: &BackboneSpec, tasks: u64, rank: u64) -> Result<BudgetReport> {
    if !spec.layers.iter().any(|l| matches!(l, LayerSpec::Conv(_))) {
        return Err(Error::InvalidSpec(format!("`{}` has no conv layers", spec.name)));
    }
    check_positive("rank", rank)?;
    ftn_budget(spec, tasks, rank, AttnVariant::Output)
}

/// Per-task factor count for `layers` attention blocks:
/// `2·L·R·(d_model + d + n)` for query/value, `L·R·(d_model + d + n)` for
/// the output projection.
pub fn attn_ftn_count(variant: AttnVariant, layers: u64, rank: u64, d_model: u64, heads: u64) -> Result<u64> {
    check_positive("rank", rank)?;
    check_positive("heads", heads)?;
    if !d_model.is_multiple_of(heads) {
        return Err(Error::InvalidArgument(format!(
            "d_model {d_model} is not divisible by {heads} heads"
        )));
    }
    let per = layers * rank * (d_model + d_model / heads + heads);
    Ok(match variant {
        AttnVariant::QueryValue => 2 * per,
        AttnVariant::Output => per,
    })
}

/// Comparison methods for transformer adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum Baseline {
    /// All four attention projections: `4·L·d_model²`.
    FineTune,
    /// Rank-`R` matrices on query and value: `4·L·R·d_model`.
    Lora,
    /// `2·L·R·d_model + K³`.
    KAdaptation { k: u64 },
    /// `m·L·d_model` for `m` modules per layer.
    Ssf { m: u64 },
}

impl Baseline {
    /// Parses a method name with its optional extra parameter (`K` or `m`).
    pub fn from_parts(name: &str, extra: Option<u64>) -> Result<Self> {
        let need = |what: &str| {
            extra.ok_or_else(|| Error::InvalidArgument(format!("method `{name}` needs its `{what}` parameter")))
        };
        Ok(match name {
            "finetune" | "fine-tune" | "fine_tune" => Baseline::FineTune,
            "lora" => Baseline::Lora,
            "kadaptation" => Baseline::KAdaptation { k: need("K")? },
            "ssf" => Baseline::Ssf { m: need("m")? },
            other => return Err(Error::InvalidArgument(format!("unknown baseline `{other}`"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Baseline::FineTune => "finetune",
            Baseline::Lora => "lora",
            Baseline::KAdaptation { .. } => "kadaptation",
            Baseline::Ssf { .. } => "ssf",
        }
    }
}

/// Per-task parameter count of a comparison method.
pub fn baseline_count(method: Baseline, layers: u64, rank: u64, d_model: u64) -> Result<u64> {
    Ok(match method {
        Baseline::FineTune => 4 * layers * d_model * d_model,
        Baseline::Lora => {
            check_positive("rank", rank)?;
            4 * layers * rank * d_model
        }
        Baseline::KAdaptation { k } => {
            check_positive("rank", rank)?;
            2 * layers * rank * d_model + k * k * k
        }
        Baseline::Ssf { m } => m * layers * d_model,
    })
}

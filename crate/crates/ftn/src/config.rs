//! JSON run configuration.

use ftn_core::factorize::CpAlsOptions;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

impl Schedule {
    /// Learning-rate multiplier at `step` of `total`.
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Cosine if total == 0 => 1.0,
            Schedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()),
        }
    }
}

/// One training phase. Factors use Adam at `factor_lr`; batch-norm, head and
/// backbone weights use SGD with momentum at `sgd_lr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub factor_lr: f64,
    pub sgd_lr: f64,
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub schedule: Schedule,
}

impl TrainConfig {
    pub fn validate(&self, what: &str) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Validation(format!("{what}: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (name, v) in [("factor_lr", self.factor_lr), ("sgd_lr", self.sgd_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a positive number, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Training samples on the source domain.
    pub source_train: usize,
    /// Training samples on each target domain.
    pub target_train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessConfig {
    pub data: DataConfig,
    pub backbone: TrainConfig,
    pub adapt: TrainConfig,
    /// Full fine-tuning runs (the comparison baseline and the source of
    /// weight deltas).
    pub finetune: TrainConfig,
    /// Samples in the fixed probe batch used by the forgetting guard.
    pub probe: usize,
    pub cp: CpAlsOptions,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            data: DataConfig { source_train: 1024, target_train: 256, test: 512 },
            backbone: TrainConfig {
                epochs: 10,
                batch_size: 32,
                factor_lr: 0.005,
                sgd_lr: 0.05,
                momentum: 0.9,
                weight_decay: 0.0,
                schedule: Schedule::Cosine,
            },
            adapt: TrainConfig {
                epochs: 15,
                batch_size: 32,
                factor_lr: 0.05,
                sgd_lr: 0.05,
                momentum: 0.9,
                weight_decay: 0.0,
                schedule: Schedule::Cosine,
            },
            finetune: TrainConfig {
                epochs: 15,
                batch_size: 32,
                factor_lr: 0.005,
                sgd_lr: 0.02,
                momentum: 0.9,
                weight_decay: 0.0,
                schedule: Schedule::Cosine,
            },
            probe: 16,
            cp: CpAlsOptions::default(),
        }
    }
}

impl HarnessConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: HarnessConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate("backbone")?;
        self.adapt.validate("adapt")?;
        self.finetune.validate("finetune")?;
        if self.data.source_train == 0 || self.data.target_train == 0 || self.data.test == 0 {
            return Err(HarnessError::Validation("data sample counts must be positive".into()));
        }
        if self.probe == 0 {
            return Err(HarnessError::Validation("probe must be positive".into()));
        }
        if self.cp.restarts == 0 || self.cp.max_sweeps == 0 {
            return Err(HarnessError::Validation("cp.restarts and cp.max_sweeps must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

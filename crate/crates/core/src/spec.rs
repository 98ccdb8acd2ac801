//! Declarative backbone descriptions.
//!
//! A spec is an ordered list of layers. Convolutions on the main path chain
//! channel counts; convolutions flagged `shortcut` are residual projections
//! that only need to agree with the current main-path output. Every conv is
//! followed by a batch norm unless `batch_norm` is false. The classification
//! head is implicit: one linear layer per task from the final feature width
//! to that task's class count.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_stride() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Defaults to `k / 2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    /// Defaults to false for the first conv (the stem) and true otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adaptable: Option<bool>,
    #[serde(default, skip_serializing_if = "core::ops::Not::not")]
    pub shortcut: bool,
    #[serde(default = "default_true")]
    pub batch_norm: bool,
}

impl ConvSpec {
    pub fn padding(&self) -> usize {
        self.padding.unwrap_or(self.k / 2)
    }

    pub fn weight_count(&self) -> u64 {
        (self.k * self.k * self.c_in * self.c_out) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub d_model: usize,
    pub heads: usize,
    #[serde(default = "default_true")]
    pub adaptable: bool,
}

impl AttentionSpec {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv(ConvSpec),
    Attention(AttentionSpec),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    /// `[C, H, W]` for conv backbones, `[S, d_model]` for token inputs.
    pub input: Vec<usize>,
    /// Declared class count per task, in registration order.
    #[serde(default)]
    pub classes: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl BackboneSpec {
    pub fn conv(&self, l: usize) -> Option<&ConvSpec> {
        match self.layers.get(l) {
            Some(LayerSpec::Conv(c)) => Some(c),
            _ => None,
        }
    }

    fn first_conv(&self) -> Option<usize> {
        self.layers.iter().position(|l| matches!(l, LayerSpec::Conv(_)))
    }

    /// Whether layer `l` receives a task-specific delta.
    pub fn is_adaptable(&self, l: usize) -> bool {
        match &self.layers[l] {
            LayerSpec::Conv(c) => c.adaptable.unwrap_or(self.first_conv() != Some(l)),
            LayerSpec::Attention(a) => a.adaptable,
        }
    }

    /// Width of the pooled feature vector fed to the head.
    pub fn feature_dim(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            LayerSpec::Conv(c) if !c.shortcut => Some(c.c_out),
            LayerSpec::Attention(a) => Some(a.d_model),
            _ => None,
        })
    }

    /// Checks channel chaining and per-layer constraints.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidSpec(format!("`{}` has no layers", self.name)));
        }
        let mut channels: Option<usize> = self.input.first().copied();
        let mut seen_attention = false;
        for (l, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv(c) => {
                    if seen_attention {
                        return Err(Error::InvalidSpec(format!(
                            "layer {l}: conv after attention is not supported"
                        )));
                    }
                    if c.k == 0 || c.c_in == 0 || c.c_out == 0 || c.stride == 0 {
                        return Err(Error::InvalidSpec(format!(
                            "layer {l}: conv dims and stride must be positive"
                        )));
                    }
                    if c.shortcut {
                        if channels != Some(c.c_out) {
                            return Err(Error::InvalidSpec(format!(
                                "layer {l}: shortcut C_out {} does not match main path {:?}",
                                c.c_out, channels
                            )));
                        }
                    } else {
                        if let Some(ch) = channels {
                            if ch != c.c_in {
                                return Err(Error::InvalidSpec(format!(
                                    "layer {l}: C_in {} does not chain from {ch}",
                                    c.c_in
                                )));
                            }
                        }
                        channels = Some(c.c_out);
                    }
                }
                LayerSpec::Attention(a) => {
                    if a.heads == 0 || a.d_model == 0 || a.d_model % a.heads != 0 {
                        return Err(Error::InvalidSpec(format!(
                            "layer {l}: d_model {} not divisible by {} heads",
                            a.d_model, a.heads
                        )));
                    }
                    let expected = if seen_attention || self.first_conv().is_some() {
                        channels
                    } else {
                        self.input.get(1).copied()
                    };
                    if let Some(ch) = expected {
                        if ch != a.d_model {
                            return Err(Error::InvalidSpec(format!(
                                "layer {l}: d_model {} does not chain from {ch}",
                                a.d_model
                            )));
                        }
                    }
                    channels = Some(a.d_model);
                    seen_attention = true;
                }
            }
        }
        if self.classes.contains(&0) {
            return Err(Error::InvalidSpec("class counts must be positive".into()));
        }
        Ok(())
    }

    /// Stricter check for specs the crate can execute: conv layers on a
    /// `[C, H, W]` input with exact output extents, no residual shortcuts.
    pub fn validate_executable(&self) -> Result<()> {
        self.validate()?;
        let &[_, mut h, mut w] = self.input.as_slice() else {
            return Err(Error::InvalidSpec(format!(
                "executable models take [C,H,W] input, got {:?}",
                self.input
            )));
        };
        if self.first_conv() != Some(0) {
            return Err(Error::InvalidSpec("executable models start with a conv".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if let LayerSpec::Conv(c) = layer {
                if c.shortcut {
                    return Err(Error::InvalidSpec(format!(
                        "layer {l}: residual shortcuts are budget-only"
                    )));
                }
                let p = c.padding();
                for (name, size) in [("H", &mut h), ("W", &mut w)] {
                    let padded = *size + 2 * p;
                    if padded < c.k || (padded - c.k) % c.stride != 0 {
                        return Err(Error::InvalidSpec(format!(
                            "layer {l}: {name} extent {} does not divide evenly (k={}, s={}, p={p})",
                            *size, c.k, c.stride
                        )));
                    }
                    *size = (padded - c.k) / c.stride + 1;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    pub(crate) fn conv(k: usize, c_in: usize, c_out: usize, stride: usize) -> LayerSpec {
        LayerSpec::Conv(ConvSpec {
            k,
            c_in,
            c_out,
            stride,
            padding: None,
            adaptable: None,
            shortcut: false,
            batch_norm: true,
        })
    }

    #[test]
    fn stem_is_not_adaptable_by_default() {
        let spec = BackboneSpec {
            name: "t".into(),
            input: vec![3, 8, 8],
            classes: vec![],
            layers: vec![conv(3, 3, 4, 1), conv(3, 4, 4, 1)],
        };
        assert!(!spec.is_adaptable(0));
        assert!(spec.is_adaptable(1));
        spec.validate_executable().unwrap();
    }

    #[test]
    fn broken_chain_rejected() {
        let spec = BackboneSpec {
            name: "t".into(),
            input: vec![3, 8, 8],
            classes: vec![],
            layers: vec![conv(3, 3, 4, 1), conv(3, 5, 4, 1)],
        };
        assert!(matches!(spec.validate(), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn uneven_stride_not_executable() {
        let spec = BackboneSpec {
            name: "t".into(),
            input: vec![3, 8, 8],
            classes: vec![],
            layers: vec![conv(3, 3, 4, 2)],
        };
        spec.validate().unwrap();
        assert!(spec.validate_executable().is_err());
    }
}

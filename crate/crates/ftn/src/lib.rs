//! File formats, synthetic data, training loops and the command-line surface
//! for factorized tensor network adapters. The numerics live in `ftn_core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod optim;
pub mod store;
pub mod train;

use ftn_core::BackboneSpec;

pub use crate::error::{HarnessError, Result};

/// Specs shipped with the binary.
pub const BUILTIN_SPECS: [(&str, &str); 5] = [
    ("resnet18", include_str!("../specs/resnet18.json")),
    ("resnet34", include_str!("../specs/resnet34.json")),
    ("resnet50", include_str!("../specs/resnet50.json")),
    ("vit_b32", include_str!("../specs/vit_b32.json")),
    ("toy4", include_str!("../specs/toy4.json")),
];

/// A built-in spec name or a path to a JSON spec.
pub fn load_spec(name_or_path: &str) -> Result<BackboneSpec> {
    let text = match BUILTIN_SPECS.iter().find(|(n, _)| *n == name_or_path) {
        Some((_, t)) => t.to_string(),
        None => std::fs::read_to_string(name_or_path).map_err(|e| {
            HarnessError::Io(format!("spec `{name_or_path}` is neither built in nor a readable file"), e)
        })?,
    };
    let spec: BackboneSpec = serde_json::from_str(&text)?;
    spec.validate()?;
    Ok(spec)
}

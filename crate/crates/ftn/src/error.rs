use thiserror::Error;

use crate::checkpoint::CheckpointError;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const VALIDATION: i32 = 2;
    pub const NUMERICAL: i32 = 3;
    pub const CONTRACT: i32 = 4;
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// The frozen backbone or a registered task changed.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Core(#[from] ftn_core::Error),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("config: {0}")]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Numerical(_) => exit::NUMERICAL,
            HarnessError::Contract(_) => exit::CONTRACT,
            _ => exit::VALIDATION,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

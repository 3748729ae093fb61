use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum LwgrError {
    /// An operation was called with arguments that violate its contract
    /// (shape mismatch, non-scalar loss, duplicate ranking entries, ...).
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// A value became NaN or infinite.
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// Invalid configuration value or combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// A referenced user, item or token does not exist.
    #[error("lookup error: {0}")]
    Lookup(String),

    /// A required input artifact is missing.
    #[error("missing dependency artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    /// Training diverged.
    #[error("training diverged at step {step}: loss {loss} exceeds {limit}")]
    Diverged { step: usize, loss: f64, limit: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl LwgrError {
    /// Stable short name of the error class, for machine-readable records.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Contract { .. } => "contract",
            Self::Numeric { .. } => "numeric",
            Self::Config(_) => "config",
            Self::Lookup(_) => "lookup",
            Self::MissingArtifact(_) => "missing_artifact",
            Self::Diverged { .. } => "diverged",
            Self::Io(_) => "io",
            Self::Json(_) => "json",
            Self::Csv(_) => "csv",
        }
    }
}

pub type Result<T, E = LwgrError> = std::result::Result<T, E>;

pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> LwgrError {
    LwgrError::Contract {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn numeric(op: &'static str, detail: impl Into<String>) -> LwgrError {
    LwgrError::Numeric {
        op,
        detail: detail.into(),
    }
}

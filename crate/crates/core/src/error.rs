use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, AltError>;

#[derive(Debug, Error)]
pub enum AltError {
    #[error("non-finite value at position {index} of {what}")]
    NonFinite { what: &'static str, index: usize },

    #[error("near-zero vector at row {row} (norm {norm:e})")]
    ZeroVector { row: usize, norm: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("non-finite loss term `{term}`")]
    NonFiniteLoss { term: &'static str },

    #[error("non-finite training loss at iteration {iter}")]
    Diverged { iter: usize },

    #[error("unsupported container version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("malformed container: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AltError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        AltError::InvalidArgument(msg.into())
    }

    /// Short stable identifier used on the CLI's machine-readable error line
    /// and mapped to FFI status codes.
    pub fn kind(&self) -> &'static str {
        match self {
            AltError::NonFinite { .. } => "non_finite",
            AltError::ZeroVector { .. } => "zero_vector",
            AltError::DimensionMismatch { .. } => "dimension_mismatch",
            AltError::InvalidArgument(_) => "invalid_argument",
            AltError::IndexOutOfRange { .. } => "index_out_of_range",
            AltError::NonFiniteLoss { .. } => "non_finite_loss",
            AltError::Diverged { .. } => "diverged",
            AltError::Version { .. } => "version",
            AltError::Format(_) => "format",
            AltError::Config(_) => "config",
            AltError::Io(_) => "io",
            AltError::Json(_) => "json",
        }
    }
}

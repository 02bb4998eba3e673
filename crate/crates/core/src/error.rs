use std::path::PathBuf;

use thiserror::Error;

use crate::attn::HeadId;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown head {0}")]
    UnknownHead(HeadId),

    #[error("attention record for {head} violates row-stochasticity at query {query}: {detail}")]
    NotStochastic {
        head: HeadId,
        query: usize,
        detail: String,
    },

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("non-finite loss (ntp={ntp}, tcas={tcas}); step rejected")]
    NonFiniteLoss { ntp: f64, tcas: f64 },

    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used by the CLI's error line.
    pub fn kind(&self) -> &'static str {
        match self {
            LabError::DimensionMismatch(_) => "dimension_mismatch",
            LabError::Empty(_) => "empty",
            LabError::InvalidArgument(_) => "invalid_argument",
            LabError::UnknownHead(_) => "unknown_head",
            LabError::NotStochastic { .. } => "not_stochastic",
            LabError::Undefined(_) => "undefined",
            LabError::NonFiniteLoss { .. } => "non_finite_loss",
            LabError::InfeasibleSpec(_) => "infeasible_spec",
            LabError::Config(_) => "config",
            LabError::Checkpoint(_) => "checkpoint",
            LabError::Io { .. } => "io",
            LabError::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HazardError>;

#[derive(Debug, Error)]
pub enum HazardError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("ingestion failed: {malformed} of {total} rows malformed (rows {rows:?})")]
    Ingest {
        malformed: usize,
        total: usize,
        rows: Vec<usize>,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("no observed events in survival data")]
    NoEvents,

    #[error("non-finite {what}; standardize covariates before fitting")]
    NonFinite { what: &'static str },

    #[error("labels must be -1 or +1, found {0}")]
    InvalidLabel(f64),

    #[error("training data contains a single class")]
    SingleClass,

    #[error("unknown factor code {0}")]
    UnknownFactor(String),

    #[error("fold assignment failed: {0}")]
    Folds(String),

    #[error("artifact mismatch: {0}")]
    Artifact(String),

    #[error("did not converge: {0}")]
    Convergence(String),

    #[error("no factor passed selection: {0}")]
    EmptySelection(String),
}

impl HazardError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HazardError::Io {
            path: path.into(),
            source,
        }
    }

    /// Input and configuration problems, as opposed to failures during
    /// computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            HazardError::Io { .. }
                | HazardError::Config(_)
                | HazardError::Json(_)
                | HazardError::Csv(_)
                | HazardError::Ingest { .. }
                | HazardError::UnknownFactor(_)
                | HazardError::Artifact(_)
        )
    }

    pub fn kind(&self) -> &'static str {
        match self {
            HazardError::Io { .. } => "io",
            HazardError::Csv(_) => "csv",
            HazardError::Json(_) => "json",
            HazardError::Ingest { .. } => "ingest",
            HazardError::Config(_) => "config",
            HazardError::Dimension { .. } => "dimension",
            HazardError::NoEvents => "no_events",
            HazardError::NonFinite { .. } => "non_finite",
            HazardError::InvalidLabel(_) => "invalid_label",
            HazardError::SingleClass => "single_class",
            HazardError::UnknownFactor(_) => "unknown_factor",
            HazardError::Folds(_) => "folds",
            HazardError::Artifact(_) => "artifact",
            HazardError::Convergence(_) => "convergence",
            HazardError::EmptySelection(_) => "empty_selection",
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

use crate::stage::Stage;

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config {path}: {reason}")]
    Config { path: PathBuf, reason: String },

    #[error("missing {what} at {path}; run `hudd {producer}` first")]
    MissingArtifact {
        what: String,
        path: PathBuf,
        producer: &'static str,
    },

    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },

    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },

    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Core(#[from] hudd_core::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("stage {stage}: {source}")]
    Stage { stage: Stage, source: Box<PipelineError> },
}

impl PipelineError {
    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PipelineError::File {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        PipelineError::Invalid(msg.into())
    }

    /// The stage the error was raised in, if it was tagged with one.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

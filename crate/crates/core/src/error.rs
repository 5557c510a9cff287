use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("ingestion error: class `{class}`: {reason}")]
    Ingestion { class: String, reason: String },

    #[error("split validation error: {0}")]
    SplitValidation(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("shape error: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("checkpoint error: {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("training diverged (loss not finite) at iteration {step}")]
    Divergence { step: usize },

    #[error("adaptation failed at step {step}: {reason}")]
    Adaptation { step: usize, reason: String },

    #[error("augmentation error: no cached variants for image `{image}`")]
    MissingCacheEntry { image: String },

    #[error("cache incomplete: {missing} of {total} entries missing (first: {first})")]
    CacheIncomplete {
        missing: usize,
        total: usize,
        first: String,
    },

    #[error("classifier error: {0}")]
    Classifier(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("io error: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SaipError {
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("failed to parse config {path}: {reason}")]
    ConfigParse { path: PathBuf, reason: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty corpus: no images found under {0}")]
    EmptyCorpus(PathBuf),

    #[error("cannot decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("image dimensions {height}x{width} are not multiples of patch size {patch}")]
    NotPatchAligned {
        height: usize,
        width: usize,
        patch: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cannot place instances: {0}")]
    Placement(String),

    #[error("no visible patches to encode")]
    NoVisiblePatches,

    #[error("parameter `{name}` mismatch: {reason}")]
    Parameter { name: String, reason: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(
        "checkpoint config hash {found} differs from current config {expected}; pass the override flag to load anyway"
    )]
    ConfigHashMismatch { expected: String, found: String },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("invalid input: {0}")]
    Invalid(String),
}

impl SaipError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SaipError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        SaipError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = SaipError> = std::result::Result<T, E>;

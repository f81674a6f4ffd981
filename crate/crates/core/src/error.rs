use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the feature, training and analysis pipelines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("input too short: {0}")]
    InputTooShort(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Divergence { epoch: usize, step: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

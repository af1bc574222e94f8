use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("BNS loss undefined: no batch normalization layers")]
    NoBatchNorm,

    #[error("statistics tables disagree; missing keys: {missing:?}")]
    KeyMismatch { missing: Vec<String> },

    #[error("quantization spec does not cover sites: {missing:?}")]
    CoverageGap { missing: Vec<String> },

    #[error("unknown dataset `{name}`; supported datasets: {supported}")]
    UnknownDataset { name: String, supported: String },

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("checksum mismatch for {file}: expected {expected}, actual {actual}")]
    ChecksumMismatch {
        file: String,
        expected: String,
        actual: String,
    },

    #[error("data-free violation: {0}")]
    DataFreeViolation(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {what}; last good checkpoint kept at {last_good:?}")]
    Diverged {
        epoch: usize,
        batch: usize,
        what: String,
        last_good: Option<PathBuf>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image encoding failed: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::Shape {
            op,
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}

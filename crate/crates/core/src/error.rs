use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    /// Bad magic, unsupported version or dtype, unknown rank.
    #[error("format error: {0}")]
    Format(String),

    /// Header and payload disagree (truncation, trailing bytes, zero dims).
    #[error("corrupt tensor: {0}")]
    Corrupt(String),

    /// Payload parsed but holds values the type forbids.
    #[error("data error: {0}")]
    Data(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Manifest, model-header or config contents violate an invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Average precision requested for a class with no positives.
    #[error("average precision undefined: no positive labels")]
    UndefinedAp,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

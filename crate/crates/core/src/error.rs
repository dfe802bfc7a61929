use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Two shapes that must agree do not; both are reported.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?} ({detail})")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
        detail: String,
    },

    #[error("{op}: {what}")]
    InvalidArgument { op: &'static str, what: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A binary container (DLT1/DLW1/DLO1) failed to parse; `offset` is the
    /// byte position at which the problem was detected.
    #[error("{path}: invalid {format} data at byte {offset}: {what}")]
    Format {
        path: PathBuf,
        format: &'static str,
        offset: u64,
        what: String,
    },

    /// Loaded parameter names do not match the names a configuration expects.
    #[error("parameter names do not match configuration: missing {missing:?}, unexpected {extra:?}")]
    ParamNameMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("training aborted at step {step}: {what}")]
    Training { step: usize, what: String },
}

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize], detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
            detail: detail.into(),
        }
    }

    pub fn invalid(op: &'static str, what: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            what: what.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for an operation.
    #[error("{op}: dimension mismatch on {axes}: {detail}")]
    Dimension {
        op: &'static str,
        axes: &'static str,
        detail: String,
    },

    /// A value lies outside the domain of an operation (e.g. `log` of a nonpositive number).
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },

    /// A caller violated a documented precondition.
    #[error("contract violated: {0}")]
    Contract(String),

    /// NaN or infinity appeared during training or evaluation.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A file could not be parsed.
    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// A checkpoint was written by an incompatible format version.
    #[error("checkpoint {path}: unsupported format version {found} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit status for this error: 2 for bad configuration, 4 for
    /// numerical failure, 3 for everything data related.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numerical(_) => 4,
            _ => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn dim(op: &'static str, axes: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            axes,
            detail: detail.into(),
        }
    }
}

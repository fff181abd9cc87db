use std::path::PathBuf;

use thiserror::Error;

/// Broad failure class, used by the CLI to choose an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Internal,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("degenerate vector: zero L2 norm in {0}")]
    DegenerateVector(&'static str),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("window size error: length {len} is not a multiple of patch length {patch_len}")]
    WindowSize { len: usize, patch_len: usize },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("manifest violation for {dataset}: {field} expected {expected}, found {found}")]
    ManifestViolation {
        dataset: String,
        field: String,
        expected: String,
        found: String,
    },

    #[error("malformed data in {path}: {detail}")]
    Malformed { path: PathBuf, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("frozen tensor {0} reached the optimizer")]
    FrozenUpdate(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Parameter(_) => ErrorKind::Config,
            Error::ManifestViolation { .. }
            | Error::Malformed { .. }
            | Error::Io { .. }
            | Error::Checkpoint(_)
            | Error::WindowSize { .. }
            | Error::InsufficientData(_) => ErrorKind::Data,
            Error::NonFinite { .. }
            | Error::DegenerateVector(_)
            | Error::Divergence(_)
            | Error::UndefinedMetric(_) => ErrorKind::Numeric,
            Error::Shape { .. } | Error::Contract(_) | Error::FrozenUpdate(_) => {
                ErrorKind::Internal
            }
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

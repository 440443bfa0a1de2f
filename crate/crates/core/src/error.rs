use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {op} got {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("constraint violated: {0}")]
    Constraint(String),

    #[error("unsupported op in differentiated path: {0}")]
    Unsupported(String),

    #[error("out-of-vocabulary token {0:?}")]
    Vocabulary(String),

    #[error("no spatial tokens")]
    NoSpatialTokens,

    #[error("empty text slice")]
    EmptyText,

    #[error("guidance mask is empty after thresholding at beta = {beta}")]
    GuidanceEmpty { beta: f64 },

    #[error("could not place objects without overlap after {tries} tries")]
    Placement { tries: usize },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("usage: {0}")]
    Usage(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite value detected in {0}")]
    Numeric(String),

    #[error("{path}: {source}")]
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

    /// Process exit code: 1 usage/config, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) | Error::Constraint(_) => 1,
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}

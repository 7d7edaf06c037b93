use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A scalar argument is outside its mathematical domain (e.g. tau <= 0).
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    /// Structurally valid input that degenerates (e.g. an all-masked row).
    #[error("degenerate input in {op}: {msg}")]
    Degenerate { op: &'static str, msg: String },

    /// A non-finite value appeared where the computation requires finite ones.
    #[error("numeric error in {context}: {msg}")]
    Numeric { context: String, msg: String },

    /// Input file could not be parsed.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// A value is outside its permitted range.
    #[error("range error in {op}: {msg}")]
    Range { op: &'static str, msg: String },

    /// A configuration value is missing or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Generic argument validation failure.
    #[error("validation error in {op}: {msg}")]
    Validation { op: &'static str, msg: String },

    /// Checkpoint file is malformed, truncated, or fails its checksum.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Prediction files passed to the ensemble do not cover the same documents.
    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("i/o error on {path}")]
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

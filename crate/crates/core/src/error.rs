//! Error type shared by every subsystem.
//!
//! The variants map one-to-one onto the CLI exit codes: config errors exit
//! with 2, data/format errors with 3, training divergence with 4 and
//! evaluation errors with 5.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An option or configuration value is out of its admissible range.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data violates a precondition (bad label, length mismatch, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A binary or text artifact on disk is malformed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Training diverged or was asked to run on an unusable split.
    #[error("training error: {0}")]
    Training(String),

    /// Metric computation was requested on an empty or inconsistent input.
    #[error("evaluation error: {0}")]
    Eval(String),

    /// An object is in the wrong state for the requested call.
    #[error("state error: {0}")]
    State(String),

    /// A non-finite value surfaced where the contract promises finite ones.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    /// Process exit code for the CLI surface.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Shape(_) | Error::Data(_) | Error::Format { .. } | Error::Io { .. } => 3,
            Error::Training(_) | Error::Numeric(_) => 4,
            Error::Eval(_) => 5,
            Error::State(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

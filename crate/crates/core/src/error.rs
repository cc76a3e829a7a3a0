//! Crate-wide error type, aligned with the CLI exit-code contract.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad schema, unknown keys, inconsistent options).
    #[error("config error: {0}")]
    Config(String),

    /// Problems with input data (missing files, malformed rows, empty after
    /// cleaning, label out of range, shape mismatches).
    #[error("data error: {0}")]
    Data(String),

    /// Numerical failure (divergence, degenerate regression, rank deficiency).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A pipeline stage failed; wraps the underlying cause.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// Precondition violation on in-memory inputs; treated as a data error.
    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(msg: impl Into<String>) -> Self {
        Error::Io(std::io::Error::other(msg.into()))
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric, 5 stage failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
            Error::Stage { .. } => 5,
        }
    }
}

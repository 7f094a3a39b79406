use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, geometry or settings that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// A NaN or infinity appeared in the output of an operation.
    #[error("numeric error: non-finite output from `{op}`")]
    NonFinite { op: &'static str },

    /// A caller broke an API precondition (non-scalar loss, missing gradient, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("malformed file {path} at byte {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Json { .. } => 2,
            Error::Format { .. } | Error::Data(_) | Error::Io { .. } => 3,
            Error::NonFinite { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or image extent does not satisfy an operation's shape contract.
    #[error("dimension error on {axis}: {detail}")]
    Dimension { axis: &'static str, detail: String },

    #[error("invalid parameter {name}: {detail}")]
    Parameter { name: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("state error: {0}")]
    State(String),

    #[error("decode error at byte {offset}: {detail}")]
    Decode { offset: u64, detail: String },

    #[error("unsupported image feature: {0}")]
    Unsupported(String),

    #[error("weight file format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(axis: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            axis,
            detail: detail.into(),
        }
    }

    pub(crate) fn param(name: &'static str, detail: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

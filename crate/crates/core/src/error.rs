use std::path::PathBuf;

use krlm_numerics::NumericsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KrlmError {
    #[error("{path}:{line}: {message}")]
    Load {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("instruction has {measured} tokens, limit is {limit}")]
    InstructionOverflow { measured: usize, limit: usize },
    #[error("empty tokenization for `{0}`")]
    EmptyTokenization(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl KrlmError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(path: &std::path::Path, line: usize, message: impl Into<String>) -> Self {
        Self::Load {
            path: path.to_path_buf(),
            line,
            message: message.into(),
        }
    }
}

pub type Result<T, E = KrlmError> = std::result::Result<T, E>;

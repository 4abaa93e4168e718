//! Command failures and their process exit codes.

use krlm_core::KrlmError;
use thiserror::Error;

use crate::config::ConfigError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn data(message: String) -> Self {
        Self::Data(message)
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Data(_) => 3,
            Self::Numeric(_) => 4,
            Self::Other(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Usage(e.to_string())
    }
}

impl From<KrlmError> for CliError {
    fn from(e: KrlmError) -> Self {
        let msg = e.to_string();
        match e {
            KrlmError::Config(_) => Self::Usage(msg),
            KrlmError::NonFiniteLoss { .. } => Self::Numeric(msg),
            KrlmError::Load { .. }
            | KrlmError::Graph(_)
            | KrlmError::InstructionOverflow { .. }
            | KrlmError::EmptyTokenization(_)
            | KrlmError::Io { .. } => Self::Data(msg),
            KrlmError::Invalid(_) | KrlmError::Numerics(_) | KrlmError::Json(_) => Self::Other(anyhow::anyhow!(msg)),
        }
    }
}

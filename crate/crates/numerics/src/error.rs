use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward requires a scalar loss, got a {rows}x{cols} tensor")]
    NotScalar { rows: usize, cols: usize },
    #[error("reduction over an empty set of rows")]
    EmptyReduction,
    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;

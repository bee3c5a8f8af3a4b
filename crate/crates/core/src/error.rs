use thiserror::Error;

/// Failure of a tensor or differentiable operation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
}

impl TensorError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        TensorError::Shape(msg.into())
    }
}

use thiserror::Error;
use vpnext_tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("parameter `{name}`: {msg}")]
    Param { name: String, msg: String },

    #[error("{0}")]
    Input(String),

    #[error("cost model has no rule for op kind `{0}`")]
    UnsupportedOp(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ModelError::Config(msg.into()))
}

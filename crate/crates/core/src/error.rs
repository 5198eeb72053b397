use thiserror::Error;

use crate::masking::MaskError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at step {step}: l_predict={l_predict} l_sparse={l_sparse} l_consistency={l_consistency}")]
    NonFinite {
        step: u64,
        l_predict: f64,
        l_sparse: f64,
        l_consistency: f64,
    },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err<V>(msg: impl Into<String>) -> Result<V> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn shape_error(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Tensor(TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

pub(crate) fn domain_error(op: &'static str, msg: impl Into<String>) -> Error {
    Error::Tensor(TensorError::Domain { op, msg: msg.into() })
}

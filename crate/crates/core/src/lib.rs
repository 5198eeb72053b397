pub mod data;
pub mod error;
pub mod eval;
pub mod scalar;
pub mod losses;
pub mod masking;
pub mod nn;
pub mod rng;
pub mod predictor;
pub mod tensor;
pub mod train;
pub mod text;
pub mod vit;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::{Graph, ReduceKind, Tensor, TensorError, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;

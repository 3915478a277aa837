//! Composite speech-language translation model with multi-task and
//! cross-modality training, built on a small reverse-mode autodiff engine.
//!
//! Everything numeric is generic over [`Scalar`]; the aliases below pin the
//! two precisions the crate uses: `f32` for training and `f64` for gradient
//! verification.

pub mod corpus;
pub mod decode;
pub mod kv;
pub mod model;
pub mod objectives;
pub mod run;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use scalar::{DType, Scalar};
pub use model::{ComSLModel, ModelConfig, ModelError, ParamGroup};
pub use tensor::{AttnMask, Gradients, ParamId, Tape, Tensor, TensorError, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;

pub type Model32 = ComSLModel<f32>;
pub type Model64 = ComSLModel<f64>;

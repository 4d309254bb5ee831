//! Continual panoptic segmentation with a frozen base network, per-step
//! prompt sets and classifier heads, and inference-time logit manipulation.

pub mod autograd;
pub mod data;
pub mod error;
pub mod harness;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Build identifier embedded in every emitted artifact.
pub const BUILD_ID: &str = concat!("pcl-", env!("CARGO_PKG_VERSION"));

pub type ModelStateF32 = model::ModelState<f32>;
pub type ModelStateF64 = model::ModelState<f64>;
pub type StepOutputF32 = model::StepOutput<f32>;
pub type StepOutputF64 = model::StepOutput<f64>;
pub type TensorF32 = tensor::Tensor<f32>;
pub type TensorF64 = tensor::Tensor<f64>;

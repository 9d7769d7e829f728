//! Masked-autoencoder pre-training for grayscale images, with a linear
//! probe and a transposed-convolution segmentation head on top of the
//! pre-trained encoder.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). Training
//! runs in `f32`; the gradient checks run in `f64`. The aliases below name
//! the common instantiations.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod patch;
pub mod pipeline;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type MaeModel32 = model::MaeModel<f32>;
pub type MaeModel64 = model::MaeModel<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type TaskHead32 = heads::TaskHead<f32>;

//! Symmetrical bidirectional image/text model: mixed-scale masked image
//! modeling with a text-guided image decoder, an image-guided text decoder,
//! alignment losses, and two-stage training, on a small reverse-mode
//! autodiff core.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the element type to `f64`, which the
//! training pipeline and gradient checks use.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod export;
pub mod gradcheck;
pub mod gradsuite;
pub mod image;
pub mod losses;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod ppm;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod text;
pub mod train;

pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape = tensor::Tape<f64>;
pub type ParamStore = params::ParamStore<f64>;
pub type Checkpoint = checkpoint::Checkpoint<f64>;

//! Weight-sharing kernel-prediction denoiser for low sample-count Monte Carlo
//! renderings.
//!
//! A small convolutional network predicts single-channel importance maps; a
//! parameter-free decoder turns each map into per-pixel softmax filtering
//! kernels, filters the demodulated irradiance with kernels of several sizes
//! and blends the results with learned per-pixel weights.

pub mod bench;
pub mod datagen;
pub mod decoder;
mod error;
pub mod metrics;
pub mod network;
pub mod preprocess;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

//! Orthogonal channel attention at desk scale.
//!
//! The crate provides:
//! - squeeze filter banks: random orthonormal (Gram-Schmidt), DCT, global
//!   average pooling, and raw random baselines, with a binary file format;
//! - the channel attention block (squeeze, excitation MLP, channel scaling)
//!   with exact analytic gradients;
//! - a small residual backbone (basic and bottleneck blocks, standard and
//!   mid-block attention placement) trained by plain SGD with momentum,
//!   cosine warm restarts, and label smoothing;
//! - a fully deterministic training harness: one seed drives filter
//!   initialization, weight initialization, batch order, and augmentation.

pub mod attention;
pub mod backbone;
pub mod cli;
pub mod data;
pub mod error;
pub mod filterbank;
pub mod gradcheck;
pub mod rng;
pub mod tensor;
pub mod train;
mod wire;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;

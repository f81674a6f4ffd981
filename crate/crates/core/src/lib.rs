//! Capsule networks with dynamic routing-by-agreement for audio
//! classification.
//!
//! The crate covers the whole pipeline: WAV loading and MFCC features
//! ([`features`]), a small reverse-mode differentiable tensor engine with
//! batch norm, BiLSTM and attention layers ([`nn`]), the capsule layer with
//! margin loss and reconstruction decoder ([`capsnet`]), training and
//! experiment sweeps ([`training`]), and capsule-output analysis with
//! transfer-feature export ([`analysis`]).
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below pin the `f64` instantiation used for training.

pub mod analysis;
pub mod capsnet;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = nn::Graph<f64>;

//! Parametric sigmoid norm (PSN) layers on a small reverse-mode autodiff
//! stack, together with margin losses, training and evaluation tooling.
//!
//! The numeric core is generic over [`Scalar`] (`f32`/`f64`); the aliases
//! below pin the double-precision variants used by the CLI and tests.

pub mod checks;
pub mod cli;
pub mod data;
pub mod losses;
pub mod models;
pub mod psn;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type PsnParams64 = psn::PsnParams<f64>;
pub type PsnParams32 = psn::PsnParams<f32>;

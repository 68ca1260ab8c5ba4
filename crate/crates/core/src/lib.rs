//! Selective BitLinear quantization for a small encoder-decoder trajectory
//! forecaster: autodiff engine, quantizers, model, tokenizer, data pipeline,
//! training loop and packed-ternary deployment kernels.
//!
//! The numeric core is generic over [`Scalar`]; the aliases below pin the
//! `f32` training/deployment types and the `f64` types used for
//! finite-difference checks.

pub mod autodiff;
pub mod bitlinear;
pub mod data;
pub mod deploy;
pub mod error;
pub mod metrics;
pub mod model;
pub mod quant;
pub mod scalar;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type TensorF32 = autodiff::Tensor<f32>;
pub type TensorF64 = autodiff::Tensor<f64>;

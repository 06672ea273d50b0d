//! Entropy model with spatio-channel window attention for learned image
//! compression: coding-group schedule, windowed attention context model with
//! cached decoding, discretized mixture rates, range coder, toy transforms,
//! analytic complexity counts and encoder-side latent refinement.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod attention;
pub mod autodiff;
pub mod codec;
pub mod coder;
pub mod complexity;
pub mod config;
pub mod context_model;
pub mod entropy;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod ordo;
pub mod scalar;
pub mod scheduler;
pub mod selftest;
pub mod synth;
pub mod tensor;
pub mod transforms;
pub mod weights;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type ContextModel32 = context_model::ContextModel<f32>;
pub type ContextModel64 = context_model::ContextModel<f64>;
pub type GmmParams32 = context_model::GmmParams<f32>;
pub type GmmParams64 = context_model::GmmParams<f64>;
pub type Codec32 = codec::Codec<f32>;
pub type Codec64 = codec::Codec<f64>;

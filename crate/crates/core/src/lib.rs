//! Keypoint-to-landmark regression with Monte Carlo dropout uncertainty and
//! reliability evaluation, on a small reverse-mode autodiff engine.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod model;
pub mod reliability;
pub mod rng;
pub mod scalar;
pub mod training;
pub mod uncertainty;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = autodiff::Tensor<f64>;
pub type Graph = autodiff::Graph<f64>;
pub type ModelParameters = model::ModelParameters<f64>;

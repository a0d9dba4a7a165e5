//! Dynamic per-layer precision selection for a small byte-level transformer.

pub mod allocator;
pub mod config;
pub mod corpus;
pub mod error;
pub mod estimator;
pub mod fitter;
pub mod model;
pub mod num;
pub mod pipeline;
pub mod provider;
pub mod quant;
pub mod runtime;
pub mod sensitivity;
mod serde_inf;
pub mod tensor;

pub use error::{Error, Result};
pub use num::Scalar;
pub use tensor::Matrix;

/// The double-precision model every pipeline stage runs on.
pub type Model = model::ModelWeights<f64>;
/// Dequantized store in double precision.
pub type Weights = quant::MaterializedStore<f64>;

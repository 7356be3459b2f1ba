//! Structure-aware MR-to-CT synthesis with organ-preserving local restyling.

pub mod adaon;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod net;
pub mod nn;
pub mod phantom;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::FeatureMap;

/// Single-precision activation map used for training and inference.
pub type FeatureMap32 = FeatureMap<f32>;
/// Double-precision activation map used by gradient checks and oracles.
pub type FeatureMap64 = FeatureMap<f64>;

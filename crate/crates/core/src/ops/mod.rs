//! Differentiable operator set: exactly what the networks need.

pub mod batchnorm;
pub mod blocks;
pub mod conv;
pub mod linalg;
pub mod pointwise;
pub mod pool;

pub use batchnorm::{BN_EPS, BN_MOMENTUM};
pub use pointwise::Activation;

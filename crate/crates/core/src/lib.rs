//! Attribution-driven attention dropout for transformer encoders.

pub mod attribution;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiments;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(test)]
mod testing;

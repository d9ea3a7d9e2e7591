//! Finite-depth ResNet training dynamics, their large-depth limits, and the
//! experiments that measure convergence rates towards those limits.

pub mod blocks;
pub mod error;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub mod resnet;
pub mod limit;
pub mod experiments;
pub mod plot;
pub mod cli;

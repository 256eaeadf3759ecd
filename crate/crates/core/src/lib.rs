//! Architecture family, synthetic underpass data, classifier training,
//! CycleGAN night-to-day translation and the evaluation harness.

pub mod arch;
pub mod checkpoint;
pub mod cyclegan;
pub mod data;
mod error;
pub mod evaluation;
pub mod training;

pub use error::{Category, Error, Result};

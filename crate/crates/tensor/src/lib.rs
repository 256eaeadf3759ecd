//! Deterministic tensors, reverse-mode autodiff and the layer set needed for
//! VGG-style classifiers and CycleGAN generators/discriminators.

mod error;
mod kernels;
pub mod layer;
pub mod network;
pub mod optim;
pub mod par;
mod scalar;
pub mod tape;
mod tensor;

#[cfg(feature = "gradcheck")]
pub mod gradcheck;

pub use error::{EngineError, Result};
pub use layer::{LayerKind, Mode};
pub use network::{shape_trace, Bound, Sequential};
pub use optim::{AdamConfig, OptimizerState};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

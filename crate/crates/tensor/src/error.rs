use thiserror::Error;

/// Failures raised by the engine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("tensor shape {shape:?} holds {expected} elements but data has {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} contains a zero dimension")]
    ZeroDimension(Vec<usize>),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward called on a tensor with no recorded graph")]
    NoGraph,
    #[error("parameter {index} has no gradient")]
    MissingGradient { index: usize },
    #[error("{0}: empty batch")]
    EmptyBatch(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid layer configuration: {0}")]
    InvalidLayer(String),
    #[error("layer expects {expected} parameter tensors, got {actual}")]
    ParamCount { expected: usize, actual: usize },
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

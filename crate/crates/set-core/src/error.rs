//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: lhs shape {lhs:?}, rhs shape {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("cannot broadcast shapes {lhs:?} and {rhs:?}")]
    IncompatibleBroadcast { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange { axis: usize, shape: Vec<usize> },
    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Errors raised by the simulator, dataset files and checkpoint containers.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Errors raised by the training loop and optimizer.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss diverged (non-finite) at step {step}")]
    Diverged { step: usize },
    #[error("non-finite gradient for parameter {name}")]
    NanGradient { name: String },
    #[error("gradient shape mismatch for parameter {name}")]
    GradShape { name: String },
    #[error("model/dataset mismatch: {0}")]
    ConfigMismatch(String),
    #[error("split {0} is empty")]
    EmptySplit(String),
    #[error("batch size {batch} exceeds split size {split}")]
    BatchTooLarge { batch: usize, split: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

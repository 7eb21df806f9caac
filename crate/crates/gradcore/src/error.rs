use thiserror::Error;

use crate::kernel::KernelKind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("{kind:?}: incompatible input shapes {shapes:?}")]
    ShapeMismatch {
        kind: KernelKind,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{kind:?}: {reason}")]
    InvalidAttr { kind: KernelKind, reason: String },
    #[error("unknown kernel id `{0}`")]
    UnknownKernel(String),
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("{kind:?} produced non-finite values from finite inputs")]
    NonFinite { kind: KernelKind },
    #[error("variable {0} does not belong to this tape")]
    ForeignVar(usize),
}

pub type Result<T, E = GradError> = std::result::Result<T, E>;

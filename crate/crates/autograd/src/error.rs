use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutogradError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("data length {len} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        len: usize,
        shape: Vec<usize>,
        expected: usize,
    },

    #[error("{op}: spatial axis {axis} of size {size} is not divisible by stride {stride}")]
    NotDivisible {
        op: &'static str,
        axis: &'static str,
        size: usize,
        stride: usize,
    },

    #[error("{op}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        op: &'static str,
        label: usize,
        classes: usize,
    },

    #[error("batchnorm2d in train mode needs at least 2 values per channel, got {0}; use a larger batch or spatial size")]
    BatchTooSmall(usize),

    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("backward already ran on this tape; record a new graph")]
    BackwardTwice,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown node id {0}")]
    UnknownNode(usize),
}

pub type Result<T> = std::result::Result<T, AutogradError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> AutogradError {
    AutogradError::Shape {
        op,
        detail: detail.into(),
    }
}

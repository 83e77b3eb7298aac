use thiserror::Error;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {actual} values were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is not linked to the tape")]
    Detached,
    #[error("variables recorded on different tapes")]
    TapeMismatch,
    #[error("no parameter named `{0}`")]
    UnknownParam(String),
}

impl TensorError {
    pub fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Shape { op, msg: msg.into() }
    }
}

use thiserror::Error;

pub type Result<T, E = GradError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("tensor shape {shape:?} holds {expected} values but {actual} were given")]
    InvalidData {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("graph was already consumed by a backward pass")]
    GraphConsumed,

    #[error("variable belongs to a different graph")]
    ForeignVar,

    #[error("parameters without gradient: {}", .0.join(", "))]
    MissingGrad(Vec<String>),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
}

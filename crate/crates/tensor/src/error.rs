use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("batch normalization in train mode needs at least 2 rows, got {rows}")]
    DegenerateBatch { rows: usize },

    #[error("backward already ran on this graph; record a new graph first")]
    BackwardTwice,

    #[error("loss must be a finite scalar, got {0}")]
    BadLoss(String),

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("invalid optimizer setting: {0}")]
    InvalidOptimizer(String),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape {
            op,
            detail: detail.into(),
        }
    }
}

use msvae_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{format} parse error at byte {offset}: {detail}")]
    Parse {
        format: &'static str,
        offset: u64,
        detail: String,
    },

    #[error("image file holds {images} items but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("{k} sources need 2^{k} states; enumeration is capped at {max} sources")]
    Capacity { k: usize, max: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset carries no ground-truth states")]
    MissingTruth,

    #[error("source {label} has no exemplars")]
    EmptySource { label: u32 },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite {component} term encountered")]
    NonFinite { component: &'static str },

    #[error("training diverged in epoch {epoch}: {detail}")]
    Diverged {
        epoch: usize,
        detail: String,
        /// Parameters at the end of the last completed epoch.
        last_good: Box<crate::msvae::MsVae>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn parse(format: &'static str, offset: u64, detail: impl Into<String>) -> Self {
        Error::Parse {
            format,
            offset,
            detail: detail.into(),
        }
    }
}

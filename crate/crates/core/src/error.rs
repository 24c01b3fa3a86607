use crate::checkpoint::CheckpointError;
use crate::graphgen::GraphError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite value at epoch {epoch} while processing training instance {instance}: {detail}")]
    NonFinite {
        epoch: usize,
        instance: usize,
        detail: String,
    },
    #[error("{0}")]
    Metric(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit status: 2 for invalid input, 3 for numeric failures, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Metric(_) | Error::Json(_) => 2,
            Error::Graph(GraphError::Io(_)) | Error::Io { .. } => 4,
            Error::Graph(_) => 2,
            Error::Checkpoint(CheckpointError::Io(_)) => 4,
            Error::Checkpoint(_) => 2,
            Error::Tensor(TensorError::NonFinite { .. }) | Error::NonFinite { .. } | Error::GradCheck(_) => 3,
            Error::Tensor(_) => 2,
        }
    }
}

use std::path::PathBuf;

use longscape_tensor::TensorError;
use thiserror::Error;

use crate::checkpoint::CheckpointError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{row}: {source}")]
    Stage {
        row: String,
        #[source]
        source: TensorError,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{}: {msg}", path.display())]
    Image { path: PathBuf, msg: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) trait StageExt<T> {
    fn stage(self, row: impl Into<String>) -> Result<T>;
}

impl<T> StageExt<T> for std::result::Result<T, TensorError> {
    fn stage(self, row: impl Into<String>) -> Result<T> {
        self.map_err(|source| Error::Stage {
            row: row.into(),
            source,
        })
    }
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, row: impl Into<String>) -> Result<T> {
        self.map_err(|e| match e {
            Error::Tensor(source) => Error::Stage {
                row: row.into(),
                source,
            },
            other => other,
        })
    }
}

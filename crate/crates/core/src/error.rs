use std::io;
use std::path::PathBuf;

use gracaps_tensor::TensorError;
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::config::Aggregation;
use crate::dataset::IdxError;
use crate::kv::KvError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid configuration: `{field}` {reason}")]
    Config { field: String, reason: String },

    #[error(transparent)]
    Kv(#[from] KvError),

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("{what} is not available for {mode} models")]
    Unsupported { mode: Aggregation, what: &'static str },

    #[error("non-finite loss at epoch {epoch}, step {step}: {origin}")]
    NonFinite {
        epoch: usize,
        step: usize,
        origin: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

use thiserror::Error;

use crate::baselines::BaselineError;
use crate::channel::{ChannelError, FormatError};
use crate::codebook::CodebookError;
use crate::hban::HbanError;
use crate::labels::LabelError;
use crate::neural::NeuralError;
use crate::sweep::SweepError;

/// Crate-level error, wrapping the per-module error types.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error(transparent)]
    Sweep(#[from] SweepError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Hban(#[from] HbanError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

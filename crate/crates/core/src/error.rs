use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::data::nifti::NiftiError;
use crate::params::ContainerError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite activations after {layer}")]
    NonFinite { layer: String },
    #[error("non-finite loss {loss} in epoch {epoch}, batch {batch} (samples {samples:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        samples: Vec<String>,
        loss: f64,
    },
    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<TensorError> for Error {
    fn from(e: TensorError) -> Self {
        Error::Autodiff(e.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

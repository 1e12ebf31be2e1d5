use thiserror::Error;

use crate::cca::CcaError;
use crate::checkpoint::CheckpointError;
use crate::data::DataError;
use crate::evaluation::MetricError;
use crate::losses::LossError;
use crate::model::ModelError;
use crate::ssl_backend::BackendError;
use crate::tokenizer::TokenizerError;
use crate::trainer::TrainError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Cca(#[from] CcaError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Coarse failure class, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Data(_) | Error::Io(_) | Error::Checkpoint(_) => ErrorClass::Data,
            Error::Tokenizer(TokenizerError::InsufficientData { .. }) => ErrorClass::Data,
            Error::Tokenizer(TokenizerError::CorruptFile(_)) => ErrorClass::Data,
            Error::Backend(BackendError::TooShortInput { .. }) => ErrorClass::Data,
            Error::Train(TrainError::NonFiniteLoss { .. }) => ErrorClass::Numerical,
            Error::Loss(LossError::NonFiniteInput) => ErrorClass::Numerical,
            Error::Cca(CcaError::RankDeficient) => ErrorClass::Numerical,
            Error::Metric(_) => ErrorClass::Numerical,
            _ => ErrorClass::Config,
        }
    }
}

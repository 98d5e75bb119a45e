//! Crate-wide error with a stable name and process exit code.

use std::fmt::Debug;

use thiserror::Error;

use crate::balance::BalanceError;
use crate::cropper::CropError;
use crate::ensemble::EnsembleError;
use crate::ingest::IngestError;
use crate::meta::MetaError;
use crate::metrics::MetricsError;
use crate::splits::SplitError;
use crate::trainer::TrainError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Balance(#[from] BalanceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Crop(#[from] CropError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NO_CONVERGENCE: i32 = 3;
pub const EXIT_IO: i32 = 4;

fn variant<T: Debug>(e: &T) -> String {
    let text = format!("{e:?}");
    let end = text.find(|c: char| !c.is_alphanumeric() && c != '_').unwrap_or(text.len());
    text[..end].to_owned()
}

impl Error {
    /// Name of the innermost error variant, e.g. `MissingColumn`.
    pub fn name(&self) -> String {
        match self {
            Error::Ingest(e) => variant(e),
            Error::Split(e) => variant(e),
            Error::Balance(e) => variant(e),
            Error::Metrics(e) => variant(e),
            Error::Crop(e) => variant(e),
            Error::Train(TrainError::Balance(e)) => variant(e),
            Error::Train(TrainError::Split(e)) => variant(e),
            Error::Train(TrainError::Metrics(e)) => variant(e),
            Error::Train(e) => variant(e),
            Error::Meta(MetaError::Metrics(e)) => variant(e),
            Error::Meta(e) => variant(e),
            Error::Ensemble(EnsembleError::Metrics(e)) => variant(e),
            Error::Ensemble(EnsembleError::Meta(MetaError::Metrics(e))) => variant(e),
            Error::Ensemble(EnsembleError::Meta(e)) => variant(e),
            Error::Ensemble(e) => variant(e),
            Error::InvalidArgument(_) => "InvalidArgument".into(),
        }
    }

    /// 4 for I/O failures, 3 for solver non-convergence, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Ingest(IngestError::Io { .. }) => EXIT_IO,
            Error::Meta(MetaError::NoConvergence { .. })
            | Error::Ensemble(EnsembleError::Meta(MetaError::NoConvergence { .. })) => EXIT_NO_CONVERGENCE,
            _ => EXIT_VALIDATION,
        }
    }
}

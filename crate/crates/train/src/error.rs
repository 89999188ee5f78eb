use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("cannot split {0} studies into train, validation and test sets")]
    TooFewStudies(usize),
    #[error("no usable samples: {0}")]
    NoSamples(String),
    #[error("nothing to resume in {0}")]
    NothingToResume(PathBuf),
    #[error(transparent)]
    Core(#[from] biometry_core::Error),
    #[error(transparent)]
    Net(#[from] biometry_nets::NetError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

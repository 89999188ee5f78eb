use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Study(String),
    #[error(transparent)]
    Core(#[from] biometry_core::Error),
    #[error(transparent)]
    Net(#[from] biometry_nets::NetError),
    #[error(transparent)]
    Train(#[from] biometry_train::TrainError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

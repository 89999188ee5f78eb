use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("input {h}x{w} is not divisible by {multiple}")]
    InputShape { h: usize, w: usize, multiple: usize },
    #[error("unknown branch tag {0:?}")]
    UnknownBranch(String),
    #[error("branch {branch} not available: model has {decoders} decoder(s)")]
    BranchUnavailable { branch: String, decoders: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = NetError> = std::result::Result<T, E>;

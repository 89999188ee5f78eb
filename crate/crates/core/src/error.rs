use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("image must be at least 8x8, got {rows}x{cols}")]
    ImageTooSmall { rows: usize, cols: usize },

    #[error("pixel spacing must be positive, got ({row_mm}, {col_mm}) mm/px")]
    InvalidSpacing { row_mm: f64, col_mm: f64 },

    #[error("non-finite pixel value at ({row}, {col})")]
    NonFinitePixel { row: usize, col: usize },

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid femur annotation: {0}")]
    InvalidAnnotation(String),

    #[error("no structure found")]
    NoStructure,

    #[error("structure too small: largest component has {pixels} px")]
    StructureTooSmall { pixels: usize },

    #[error("degenerate conic")]
    DegenerateConic,

    #[error("anisotropic spacing requires a direction vector for straight-line measures")]
    DirectionRequired,

    #[error("endpoints not separable")]
    EndpointsNotSeparable,

    #[error("incomplete biometrics: {0} missing")]
    IncompleteBiometrics(&'static str),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("statistical test undefined: {0}")]
    DegenerateSample(String),

    #[error("study {study}: {field}: {reason}")]
    Manifest {
        study: String,
        field: String,
        reason: String,
    },

    #[error("{path}: no manifest row for this image")]
    MissingManifestRow { path: PathBuf },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

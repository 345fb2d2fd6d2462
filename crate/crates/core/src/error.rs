use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the reconstruction and segmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("invalid image grid: {0}")]
    Grid(String),

    #[error("source at ({x:.3}, {y:.3}) lies inside the image grid")]
    SourceInsideGrid { x: f64, y: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid phantom: {0}")]
    Phantom(String),

    #[error("rank {rank} out of range 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },

    #[error("ill-posed configuration: {0}")]
    IllPosed(String),

    #[error("numerical breakdown at slice {slice}: {reason}")]
    NumericalBreakdown { slice: usize, reason: String },

    #[error("slice {slice}: {source}")]
    AtSlice {
        slice: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("solver did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mask is not binary: value {value} at index {index}")]
    NonBinaryMask { index: usize, value: u8 },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_slice(self, slice: usize) -> Self {
        match self {
            e @ (Error::AtSlice { .. } | Error::NumericalBreakdown { .. }) => e,
            e => Error::AtSlice {
                slice,
                source: Box::new(e),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

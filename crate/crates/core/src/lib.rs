//! Sequential sparse-angle CT reconstruction with a dimension-reduced
//! Kalman filter, and density-peak segmentation of the result.

pub mod error;
pub mod experiment;
pub mod geometry;
pub mod baseline;
pub mod config;
pub mod dpa;
pub mod drkf;
pub mod linalg;
pub mod metrics;
pub mod phantom;
pub mod prior;
pub mod projector;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{FanBeamGeometry, Point2, RotationSchedule, Scheme, SliceAngleSet};
pub use projector::{ImageGrid, MatrixCache, SparseProjection};
pub use prior::{PriorSpec, ReducedBasis};
pub use drkf::{FilterState, NoiseModel, RegularizerSchedule};
pub use phantom::{KnotSpec, LogPhantom, ScanSlice};
pub use volume::{LabelVolume, Volume};

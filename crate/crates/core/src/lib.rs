//! Stochastic multiscale patch registration of 3D volumes.
//!
//! Small patches of constant array size are cut from a fixed and a moving
//! image at a sequence of resolutions, from one patch covering the whole
//! image down to source resolution. A small network per group of scales
//! predicts the local displacement between each patch pair. During training
//! patches are nested so that each finer patch refines the displacement of its
//! coarser parent; during inference many overlapping patches are averaged
//! into a global displacement field, scale by scale.
//!
//! Conventions used throughout:
//! - world coordinates are millimetres;
//! - voxel arrays store `x` fastest, and coordinate vectors are ordered `(x, y, z)`;
//! - volumetric tensors are `(batch, channel, z, y, x)`.

pub mod cascade;
pub mod evalmetrics;
pub mod geometry;
pub mod heads;
pub mod inference;
pub mod losses;
pub mod ops;
pub mod trainer;
pub mod volumes;

pub use diffcore::Checkpoint;
pub use geometry::{Affine, Canvas};
pub use volumes::{ImageStack, LabelVolume};

use diffcore::DiffError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("singular transform (|det| = {0:e})")]
    Singular(f64),
    #[error("degenerate volume: {0}")]
    DegenerateVolume(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("image has no positive intensities")]
    EmptyImage,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("incompatible schedule: {0}")]
    IncompatibleSchedule(String),
    #[error("fixed and moving images do not overlap")]
    EmptyOverlap,
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: u64, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

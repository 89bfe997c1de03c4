//! Differentiable operators. Each one is a method on [`crate::Graph`].

mod conv;
mod elementwise;
mod linalg;
mod norm;
mod resample;

pub use norm::{BatchStats, NormMode};
pub use resample::{identity_grid, trilinear, trilinear_corners, Corner, Padding};

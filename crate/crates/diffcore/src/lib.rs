//! Minimal reverse-mode automatic differentiation for small 3D networks.
//!
//! The engine records operations on a [`Graph`] tape and replays them in
//! reverse. It carries exactly the operators the PatchMorph heads and losses
//! need: 3D convolution, normalization, leaky ReLU, nearest upsampling,
//! trilinear grid sampling, small batched matrix products and scaling-and-squaring
//! integration of velocity fields. Downstream crates add their own operators
//! through [`Graph::push`].

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod init;
pub mod ops;
pub mod optim;
pub mod params;
mod real;
mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{Backward, BackwardCtx, Gradients, Graph, Var};
pub use ops::{NormMode, Padding};
pub use params::{Binding, ParamStore};
pub use real::Real;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DiffError> = std::result::Result<T, E>;

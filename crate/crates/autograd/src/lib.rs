//! Minimal reverse-mode automatic differentiation for 3D convolutional
//! networks on the CPU.
//!
//! A [`Graph`] records the forward pass of one batch against a borrowed
//! [`ParamStore`]; [`Graph::backward`] returns one gradient per parameter.
//! Only the operators a V-Net style encoder/decoder needs are provided.

mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use graph::{Graph, Var};
pub use kernels::ConvGeometry;
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter {0} registered twice")]
    DuplicateParam(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}

pub type Result<T> = std::result::Result<T, Error>;

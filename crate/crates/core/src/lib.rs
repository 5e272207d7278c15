//! Semi-supervised volumetric segmentation with a label-space diffusion
//! model, a difficulty-aware re-weighted decoder and a distilled predictor.

pub mod config;
pub mod data;
pub mod diffusion;
pub mod drs;
mod error;
pub mod eval;
pub mod grid;
pub mod network;
pub mod objectives;
pub mod rs;
pub mod svda;
pub mod trainer;
pub mod types;

pub use adseg_autograd as autograd;
pub use error::{Error, Result};
pub use types::*;

//! Group-informed transformer for sequential recommendation.
//!
//! The crate stacks a small reverse-mode autodiff tape ([`tape`]), the data
//! pipeline ([`data`]), the model itself ([`embedding`], [`group`], [`block`],
//! [`model`]), training and evaluation ([`train`], [`metrics`]), and the
//! analysis exports ([`analyze`]). Everything is f64 and single-threaded;
//! the target scale is desk-size experiments, not clusters.

pub mod analyze;
pub mod block;
pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod fdcheck;
pub mod group;
mod kernels;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{GritError, Result};
pub use tensor::Tensor;

//! Open-world attribution of synthetic forgeries: a small autodiff engine, a
//! convolutional model, pairwise and pseudo-label objectives, semi-supervised
//! clustering, evaluation metrics and the multi-stage training harness.

pub mod cluster;
pub mod data;
pub mod error;
mod format;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod pairing;
pub mod pseudo;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};

//! Latent-factor domain generalization for probabilistic forecasting.
//!
//! Windows are decomposed into trend and seasonal parts, encoded by a pair
//! of conditional VAEs whose latents are split into domain-shared and
//! domain-specific coordinates, and the fused latent augments the input of
//! a probabilistic forecasting decoder.

pub mod cvae;
pub mod data;
pub mod decomposition;
pub mod error;
pub mod evaluation;
pub mod forecaster;
pub mod latent;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod training;

pub use error::{Error, ErrorKind, Result};

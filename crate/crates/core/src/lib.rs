//! Diverse and admissible trajectory forecasting on synthetic road scenes.
//!
//! The crate covers scene generation, the DPP diversity machinery, the
//! forecasting networks, their losses, evaluation metrics and the two-stage
//! training pipeline.

pub mod dpp;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod plot;
pub mod scene;
pub mod train;

pub use error::{Error, Result};

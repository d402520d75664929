//! Class-incremental learning with discriminative distillation.
//!
//! Each learning round trains a temporary expert on the new classes and the
//! old classes they are most easily confused with, then distills both the
//! expert and the previous classifier into the updated classifier. The crate
//! also provides the baselines, a synthetic benchmark with controllable class
//! confusability, and an error analysis that separates confusion between
//! similar classes from forgetting.

pub mod cli;
pub mod config;
pub mod data;
pub mod engine;
mod error;
pub mod expert;
pub mod losses;
pub mod matrix;
pub mod memory;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod rng;
pub mod similarity;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use nn::MlpClassifier;

//! Experiment harness for multi-teacher distillation: run configuration,
//! dataset and checkpoint files, the training pipeline, reports and the CLI.

pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod pipeline;
pub mod report;
pub mod variant;

pub use error::{Error, Result};

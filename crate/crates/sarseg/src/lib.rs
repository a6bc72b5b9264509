//! Dataset files, checkpoints, training loops and the command line around
//! the `sarseg-core` model.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod config;
mod error;
pub mod format;
pub mod pipeline;
pub mod predict;
pub mod pretraining;
pub mod report;
pub mod train;

pub use error::{Error, Result};

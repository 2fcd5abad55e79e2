//! File formats, orchestration and the command-line front end for
//! `vtn-core`: run configs, checkpoints, dataset blobs and visualisations.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod run;
pub mod visualize;

pub use error::{AppError, Result};

//! Pipeline front end for the deterministic diffusion model: dataset
//! generation, training, reconstruction, uncertainty analysis and
//! evaluation, with their on-disk formats.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

pub use config::RunConfig;
pub use error::{CliError, Result};

//! Reproducible commands over the dynamic mesh pipeline: dataset building,
//! VAE and flow training, latent statistics, animation, embedding import,
//! the sampling-ratio sweep and component ablations.

pub mod commands;
pub mod config;
pub mod corpus;
pub mod error;
pub mod manifest;
pub mod obj;

pub use commands::Globals;
pub use config::RunConfig;
pub use error::{CliError, CliResult};

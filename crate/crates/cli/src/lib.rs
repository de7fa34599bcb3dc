//! Reproducible experiments over the `glrep` library: simulation, training,
//! evaluation, forecasting, latent sweeps and gradient checks.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::*;
pub use config::{resolve, Overrides, RunConfig};
pub use error::{CliError, Result};

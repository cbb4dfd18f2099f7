//! Command-line driver and re-rank service for the `vqarank` library.

pub mod backends;
pub mod commands;
pub mod config;
pub mod error;
pub mod serve;

pub use config::{BackendMode, Config, Overrides};
pub use error::CliError;

//! Command-line driver: configuration, weight files and report emission.

pub mod commands;
pub mod config;
pub mod error;
pub mod verify;
pub mod weights;

pub use error::CliError;

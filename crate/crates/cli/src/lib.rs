//! Pipeline commands behind the `npdk` binary: synthesis, training,
//! evaluation, anchor analysis, and inference.

pub mod commands;
pub mod config;
pub mod error;
pub mod train;

pub use error::CliError;

//! Command-line front end of `urveda`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (including partial evaluation failures), 3 numeric failure.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod render;

pub use commands::{run, Cli};
pub use error::CliError;

//! Command-line front end: argument parsing, subcommands and reporting.

pub mod app;
pub mod commands;
pub mod config;
pub mod error;

pub use app::{main_with_args, Cli};
pub use config::RunConfig;
pub use error::CliError;

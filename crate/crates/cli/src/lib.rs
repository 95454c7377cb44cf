//! Command line front end and HTTP service for mitra.

pub mod commands;
pub mod server;

pub use commands::{run, Cli, CliError, Command};

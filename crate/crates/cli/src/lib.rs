//! Command-line front end and HTTP editing service for `scene-edit`.

pub mod commands;
pub mod server;

pub use commands::{run, Cli, CliError, Command};

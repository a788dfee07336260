//! Command implementations behind the `pvvae` binary, exposed as a library
//! so pipelines can also be driven from tests.

pub mod cli;
pub mod commands;
pub mod config;
pub mod eval;
pub mod manifest;
pub mod pipeline;

pub use cli::{Cli, Command};
pub use commands::{run, CliError};
pub use config::RunConfig;

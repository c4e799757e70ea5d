//! Library side of the `addrop` command: config parsing, subcommands and
//! artifact writers.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use commands::{run, Command, Invocation};
pub use error::CliError;

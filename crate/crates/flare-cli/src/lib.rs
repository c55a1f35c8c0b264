//! Command-line front end: dataset generation, training, evaluation,
//! spectral probing and complexity benchmarking over the core library.

pub mod bench;
pub mod commands;
pub mod config;

pub use commands::{CliError, CmdResult};
pub use config::RunConfig;

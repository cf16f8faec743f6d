//! Batch front end: every command reads a JSON run config, writes its
//! artifacts under one output directory and echoes the effective config there.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::CliError;

//! Library surface of the experiment CLI: configuration, the replication
//! pipeline, and the command implementations. The binary in `main.rs` is a
//! thin argument-parsing shell over these.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;

pub use error::{CliError, CliResult};

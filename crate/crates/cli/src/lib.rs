//! Command implementations behind the `kdbench` binary.

pub mod bench;
pub mod commands;
pub mod compare;
pub mod config;
pub mod error;
pub mod reward;
pub mod stats;

pub use error::{CliError, Result};

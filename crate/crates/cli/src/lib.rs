//! Command-line driver for `gpfield-core`: configuration schema, CSV and
//! JSON file formats, and the `simulate`, `train`, `rollout` and
//! `evaluate` commands.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod csv_io;
pub mod error;
pub mod fsutil;
pub mod model_file;

pub use error::{CliError, CliResult, EXIT_RUNTIME, EXIT_USAGE};

//! Batch front end: long-CSV ingestion, run configuration and the
//! `simulate`, `fit`, `forecast` and `test-causality` subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod ingest;
pub mod report;

pub use commands::{run, Command};
pub use config::RunConfig;
pub use error::{CliError, Result};
pub use ingest::{ingest, IngestedData, LongCsvRecord};

//! File formats, run directories and the command-line pipelines around
//! `mlfn-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod report;
pub mod run;

pub use error::{CliError, Result};

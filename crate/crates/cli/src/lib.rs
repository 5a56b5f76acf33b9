//! Command-line companion of `flowrde-core`: run configuration, file formats
//! and the verification suites.

pub mod config;
pub mod error;
pub mod output;
pub mod run;
pub mod suites;

pub use config::{FieldSpec, RunConfig, SolverSettings};
pub use error::{CliError, Result};

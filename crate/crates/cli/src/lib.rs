//! Command-line driver for the `fedmtl` simulator: experiment specs,
//! sweeps, output files and the bound and topology calculators.

pub mod commands;
pub mod error;
pub mod experiment;
pub mod spec;

pub use error::{CliError, Result};
pub use experiment::{run_experiment, ExperimentSummary};
pub use spec::{ExperimentSpec, Overrides};

//! Config-driven experiment harness over the one-shot federated pipeline:
//! synthetic-data recipes, partition sweeps, payload accounting and
//! structured run reports.

pub mod config;
pub mod error;
pub mod payload;
pub mod report;
pub mod runner;
pub mod synthetic;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
pub use report::RunReport;
pub use runner::{run, run_in_memory, sweep};

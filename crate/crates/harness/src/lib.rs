//! Experiment harness: configuration, application runs, reports, gradient audits.

pub mod cli;
pub mod config;
pub mod experiment;
pub mod gradcheck;
pub mod prices;
pub mod report;

pub use config::{Application, ExperimentConfig};
pub use experiment::{run_experiment, ExperimentResult, Instance, RunError};

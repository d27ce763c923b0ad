//! Experiment harness behind the `polarseq` binary.

pub mod commands;
pub mod experiment;
pub mod output;
pub mod scheme;

pub use experiment::ExperimentConfig;
pub use scheme::Scheme;

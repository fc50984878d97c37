//! Experiment harness for the rotation-recurrent sequence model:
//! configuration, training loop, evaluation, norm telemetry, gradient
//! checking, scan benchmarking, and checkpoint I/O, behind a small CLI.

pub mod bench;
pub mod checkpoint;
pub mod checks;
pub mod cli;
pub mod config;
pub mod error;
pub mod metrics;
pub mod probes;
pub mod train;

pub use error::{HarnessError, Result};

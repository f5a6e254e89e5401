//! Orchestration around `baret-core`: inversion cache, metrics, job
//! configuration, toy suites, bench and the command implementations behind
//! the `baret` binary.

pub mod cache;
pub mod config;
pub mod error;
pub mod jobs;
pub mod metrics;
pub mod store;
pub mod suites;
pub mod weights;

pub use error::{PipelineError, Result};

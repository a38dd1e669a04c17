//! File formats, configuration, experiment harness and command-line
//! plumbing built on `saelab-core`.

pub mod config;
pub mod error;
pub mod harness;
pub mod io;
pub mod pipeline;
pub mod world;

pub use config::ExperimentConfig;
pub use error::{LabError, Result};

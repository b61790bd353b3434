//! Batch front end for the recursive cross-view pipeline: synthetic scene
//! generation, detection over frame manifests, AP evaluation, detector-noise
//! sweeps, and the annotation server.

pub mod commands;
pub mod config;

pub use config::{ConfigError, DetectorSpec, PipelineConfig};

//! File-mediated study pipeline: each stage reads the artifacts of earlier
//! stages from the work directory and writes its own, with sidecars.

pub mod artifacts;
pub mod config;
mod stages;

pub use config::PipelineConfig;
pub use stages::*;

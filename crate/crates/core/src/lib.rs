pub mod augment;
pub mod checkpoint;
pub mod blocks;
pub mod classifier;
pub mod embedding;
pub mod harness;
mod error;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod postprocess;
pub mod pyramid;
pub mod raster;
pub mod sample;
pub mod synth;

pub use error::{Error, Result};

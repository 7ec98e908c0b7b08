//! Volume files, synthetic data, training, inference and evaluation for
//! the feature-fused context-encoding segmentation network.

pub mod checkpoint;
pub mod error;
pub mod infer;
pub mod manifest;
pub mod sample;
pub mod synth;
pub mod train;
pub mod volume;

pub use crate::error::{Error, Result};

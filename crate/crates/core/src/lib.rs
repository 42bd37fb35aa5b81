//! Local-global omni-slice risk prediction for volumetric scans.
//!
//! Each volume is read as an ordered bag of pseudo-RGB slices (a slice
//! stacked with its neighbours `gap` slices away), encoded by a small CNN,
//! contextualised by a transformer over the slice sequence and pooled by
//! attention into a multi-horizon risk vector. Three plane-specific models
//! can be fused, and their slice attention combined into a voxel saliency
//! map.

pub mod aggregator;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod metrics;
mod init;
pub mod model;
pub mod model_io;
pub mod multiplane;
pub mod numerics;
pub mod risk;
pub mod synthcohort;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};

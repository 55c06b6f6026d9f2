//! Weakly supervised semantic segmentation from sparse point annotations.
//!
//! The pipeline trains a small two-head convolutional network where the base
//! head learns from the original point labels while the expanded head learns
//! from labels propagated by a seeded region-growing step, with a consistency
//! penalty tying the two heads together. A self-training phase finetunes on
//! pseudo labels produced by the averaged heads.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rasterio;
pub mod regiongrow;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};

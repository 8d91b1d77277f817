//! Slice-wise 2D segmentation of intracranial hemorrhage on head CT.
//!
//! Volumes are `(H, W, S)` arrays with per-axis spacing in millimetres.
//! Slices are cut along the last axis, turned into multi-channel inputs,
//! segmented by a residual encoder-decoder with deep supervision, and
//! restacked into probability volumes that fold models average.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod inference;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod preprocessing;
pub mod training;
pub mod volume_io;

pub use error::{Error, Result};

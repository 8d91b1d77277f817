//! Volumes, masks, the dataset manifest, fold splits and synthetic cases.
//!
//! Array axis order is `(row, column, slice)`; slices run along the
//! low-resolution axis and are never resampled.

mod folds;
mod manifest;
mod nifti_io;
mod synthetic;

use ndarray::Array3;
use nifti::NiftiHeader;

use crate::error::{Error, Result};

pub use folds::{make_folds, FoldAssignment};
pub use manifest::{CaseEntry, Manifest};
pub use nifti_io::{load_mask, load_volume, save_mask, save_probability, save_volume};
pub use synthetic::{generate_synthetic_case, SyntheticSpec};

/// Physical voxel size `(dx, dy, dz)` in millimetres.
pub type Spacing = [f64; 3];

pub(crate) fn check_spacing(spacing: Spacing) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::arg(format!(
            "spacing must be positive, got {spacing:?}"
        )))
    }
}

/// A CT volume in Hounsfield units.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    pub spacing: Spacing,
    pub case_id: String,
    /// Header of the file this volume came from. Orientation and other
    /// geometry fields are copied from it when derived images are written.
    pub header: Option<NiftiHeader>,
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: Spacing, case_id: impl Into<String>) -> Result<Self> {
        check_spacing(spacing)?;
        Ok(Self {
            data,
            spacing,
            case_id: case_id.into(),
            header: None,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn n_slices(&self) -> usize {
        self.data.dim().2
    }
}

/// Binary segmentation aligned with a [`Volume`]; 1 marks hemorrhage.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub data: Array3<u8>,
    pub spacing: Spacing,
    pub case_id: String,
}

impl Mask {
    /// Fails unless every value is 0 or 1.
    pub fn new(data: Array3<u8>, spacing: Spacing, case_id: impl Into<String>) -> Result<Self> {
        check_spacing(spacing)?;
        if data.iter().any(|&v| v > 1) {
            return Err(Error::arg("mask values must be 0 or 1"));
        }
        Ok(Self {
            data,
            spacing,
            case_id: case_id.into(),
        })
    }

    pub fn zeros(
        shape: (usize, usize, usize),
        spacing: Spacing,
        case_id: impl Into<String>,
    ) -> Self {
        Self {
            data: Array3::zeros(shape),
            spacing,
            case_id: case_id.into(),
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    /// Number of foreground voxels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }
}

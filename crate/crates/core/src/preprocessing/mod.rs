//! Turns CT volumes into 2D multichannel network inputs.
//!
//! Windowing maps HU to `[0, 1]`; inputs are built from adjacent slices,
//! several windows, or both (window-major channel order).

mod augment;
pub(crate) mod crop;

use ndarray::{s, Array, Array2, Array3, ArrayView, ArrayView3, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume_io::Volume;

pub use augment::{augment, flip, AugmentConfig};
pub use crop::{foreground_biased_crop, CropConfig};

/// Linear HU window defined by its center (level) and width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub center: f32,
    pub width: f32,
    pub name: String,
}

impl WindowSpec {
    pub fn new(center: f32, width: f32, name: impl Into<String>) -> Result<Self> {
        let w = Self {
            center,
            width,
            name: name.into(),
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width > 0.0 && self.width.is_finite() && self.center.is_finite() {
            Ok(())
        } else {
            Err(Error::arg(format!(
                "window {:?} must have finite center and positive width",
                self.name
            )))
        }
    }

    pub fn brain() -> Self {
        Self {
            center: 40.0,
            width: 80.0,
            name: "brain".into(),
        }
    }

    pub fn subdural() -> Self {
        Self {
            center: 80.0,
            width: 200.0,
            name: "subdural".into(),
        }
    }

    pub fn bone() -> Self {
        Self {
            center: 600.0,
            width: 2800.0,
            name: "bone".into(),
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "brain" => Some(Self::brain()),
            "subdural" => Some(Self::subdural()),
            "bone" => Some(Self::bone()),
            _ => None,
        }
    }

    /// The standard head-CT trio: brain, subdural, bone.
    pub fn head_ct_trio() -> Vec<Self> {
        vec![Self::brain(), Self::subdural(), Self::bone()]
    }

    #[inline]
    pub fn map(&self, hu: f32) -> f32 {
        let c = self.center as f64;
        let w = self.width as f64;
        ((hu as f64 - (c - w / 2.0)) / w).clamp(0.0, 1.0) as f32
    }
}

/// `clamp((v - (center - width/2)) / width, 0, 1)` elementwise.
pub fn apply_window<D: Dimension>(
    values: ArrayView<'_, f32, D>,
    window: &WindowSpec,
) -> Array<f32, D> {
    values.mapv(|v| window.map(v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StrategyKind {
    AdjacentSlices,
    MultiWindow,
    Combined,
}

/// How a slice becomes a multichannel image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputStrategy {
    pub kind: StrategyKind,
    pub windows: Vec<WindowSpec>,
    pub n_adjacent: usize,
}

impl InputStrategy {
    /// Three neighbouring slices under the brain window.
    pub fn adjacent_slices() -> Self {
        Self {
            kind: StrategyKind::AdjacentSlices,
            windows: vec![WindowSpec::brain()],
            n_adjacent: 3,
        }
    }

    /// One slice under brain, subdural and bone windows.
    pub fn multi_window() -> Self {
        Self {
            kind: StrategyKind::MultiWindow,
            windows: WindowSpec::head_ct_trio(),
            n_adjacent: 1,
        }
    }

    /// Three slices under three windows, nine channels.
    pub fn combined() -> Self {
        Self {
            kind: StrategyKind::Combined,
            windows: WindowSpec::head_ct_trio(),
            n_adjacent: 3,
        }
    }

    pub fn from_kind(kind: StrategyKind) -> Self {
        match kind {
            StrategyKind::AdjacentSlices => Self::adjacent_slices(),
            StrategyKind::MultiWindow => Self::multi_window(),
            StrategyKind::Combined => Self::combined(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for w in &self.windows {
            w.validate()?;
        }
        let (windows, adjacent) = match self.kind {
            StrategyKind::AdjacentSlices => (1, 3),
            StrategyKind::MultiWindow => (3, 1),
            StrategyKind::Combined => (3, 3),
        };
        if self.windows.len() != windows || self.n_adjacent != adjacent {
            return Err(Error::Config(format!(
                "{:?} needs {windows} window(s) and n_adjacent = {adjacent}, got {} and {}",
                self.kind,
                self.windows.len(),
                self.n_adjacent
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.windows.len() * self.n_adjacent
    }
}

/// One training or inference example.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    /// `(C, H, W)`, values in `[0, 1]`.
    pub image: Array3<f32>,
    /// `(H, W)`, values in `{0, 1}`.
    pub label: Array2<u8>,
    pub case_id: String,
    pub slice_index: usize,
}

impl SliceSample {
    pub fn new(
        image: Array3<f32>,
        label: Array2<u8>,
        case_id: impl Into<String>,
        slice_index: usize,
    ) -> Result<Self> {
        let (_, h, w) = image.dim();
        if label.dim() != (h, w) {
            return Err(Error::Alignment(format!(
                "image plane {:?} vs label {:?}",
                (h, w),
                label.dim()
            )));
        }
        Ok(Self {
            image,
            label,
            case_id: case_id.into(),
            slice_index,
        })
    }
}

/// Slice indices `index - n/2 ..= index + n/2`, clamped into `[0, n_slices)`.
fn adjacent_indices(index: usize, n: usize, n_slices: usize) -> Result<Vec<usize>> {
    if n.is_multiple_of(2) {
        return Err(Error::arg(format!("n_adjacent must be odd, got {n}")));
    }
    if index >= n_slices {
        return Err(Error::arg(format!(
            "slice index {index} out of range for {n_slices} slices"
        )));
    }
    let half = (n / 2) as isize;
    Ok((-half..=half)
        .map(|o| (index as isize + o).clamp(0, n_slices as isize - 1) as usize)
        .collect())
}

/// Stacks `n` neighbouring slices of an `(H, W, S)` array into `(n, H, W)`.
/// Edge slices are replicated where the neighbourhood leaves the volume.
pub fn stack_adjacent_slices(
    volume_norm: ArrayView3<'_, f32>,
    index: usize,
    n: usize,
) -> Result<Array3<f32>> {
    let (h, w, s) = volume_norm.dim();
    let indices = adjacent_indices(index, n, s)?;
    let mut out = Array3::zeros((n, h, w));
    for (c, &k) in indices.iter().enumerate() {
        out.slice_mut(s![c, .., ..])
            .assign(&volume_norm.slice(s![.., .., k]));
    }
    Ok(out)
}

/// Network input for slice `index`: channel `w * n_adjacent + a` is
/// neighbour `a` under window `w`.
pub fn build_input(volume: &Volume, index: usize, strategy: &InputStrategy) -> Result<Array3<f32>> {
    strategy.validate()?;
    let (h, w, s) = volume.shape();
    let indices = adjacent_indices(index, strategy.n_adjacent, s)?;
    let mut out = Array3::zeros((strategy.channels(), h, w));
    let mut c = 0;
    for window in &strategy.windows {
        for &k in &indices {
            let plane = volume.data.slice(s![.., .., k]);
            out.slice_mut(s![c, .., ..])
                .assign(&apply_window(plane, window));
            c += 1;
        }
    }
    Ok(out)
}

/// Builds the input and label for slice `index` of a labelled case.
pub fn slice_sample(
    volume: &Volume,
    label: &ndarray::Array3<u8>,
    index: usize,
    strategy: &InputStrategy,
) -> Result<SliceSample> {
    if label.dim() != volume.shape() {
        return Err(Error::Alignment("label and volume shapes differ".into()));
    }
    let image = build_input(volume, index, strategy)?;
    let plane = label.slice(s![.., .., index]).to_owned();
    SliceSample::new(image, plane, volume.case_id.clone(), index)
}

use ndarray::{s, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SliceSample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropConfig {
    /// `(height, width)` of the patch.
    pub size: [usize; 2],
    /// Probability of centring the patch on a foreground pixel.
    pub p_foreground: f64,
    pub pad_value: f32,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            size: [384, 384],
            p_foreground: 0.66,
            pad_value: 0.0,
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size.contains(&0) {
            return Err(Error::arg("crop size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_foreground) {
            return Err(Error::arg("p_foreground must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Symmetric padding amounts `(before, after)` growing `len` to `target`.
pub(crate) fn pad_amounts(len: usize, target: usize) -> (usize, usize) {
    let total = target.saturating_sub(len);
    (total / 2, total - total / 2)
}

/// Pads `image` and `label` symmetrically up to at least `size`.
pub(crate) fn pad_to(
    image: &Array3<f32>,
    label: &Array2<u8>,
    size: [usize; 2],
    pad_value: f32,
) -> (Array3<f32>, Array2<u8>) {
    let (c, h, w) = image.dim();
    let (top, bottom) = pad_amounts(h, size[0]);
    let (left, right) = pad_amounts(w, size[1]);
    if top + bottom + left + right == 0 {
        return (image.clone(), label.clone());
    }
    let (ph, pw) = (h + top + bottom, w + left + right);
    let mut img = Array3::from_elem((c, ph, pw), pad_value);
    img.slice_mut(s![.., top..top + h, left..left + w])
        .assign(image);
    let mut lab = Array2::zeros((ph, pw));
    lab.slice_mut(s![top..top + h, left..left + w])
        .assign(label);
    (img, lab)
}

/// Cuts a `cfg.size` patch. Smaller slices are padded symmetrically first.
/// With probability `p_foreground` (and a nonempty label) the patch is
/// centred on a uniformly drawn foreground pixel, shifted to stay in bounds;
/// otherwise its position is uniform.
pub fn foreground_biased_crop<R: Rng + ?Sized>(
    sample: &SliceSample,
    cfg: &CropConfig,
    rng: &mut R,
) -> Result<SliceSample> {
    cfg.validate()?;
    let (image, label) = pad_to(&sample.image, &sample.label, cfg.size, cfg.pad_value);
    let (_, h, w) = image.dim();
    let [ch, cw] = cfg.size;

    let use_foreground = rng.random_bool(cfg.p_foreground);
    let n_fg = label.iter().filter(|&&v| v != 0).count();
    let (top, left) = if use_foreground && n_fg > 0 {
        let pick = rng.random_range(0..n_fg);
        let (y, x) = label
            .indexed_iter()
            .filter(|(_, &v)| v != 0)
            .nth(pick)
            .map(|(idx, _)| idx)
            .expect("pick < foreground count");
        (
            (y as isize - (ch / 2) as isize).clamp(0, (h - ch) as isize) as usize,
            (x as isize - (cw / 2) as isize).clamp(0, (w - cw) as isize) as usize,
        )
    } else {
        (rng.random_range(0..=h - ch), rng.random_range(0..=w - cw))
    };

    SliceSample::new(
        image
            .slice(s![.., top..top + ch, left..left + cw])
            .to_owned(),
        label.slice(s![top..top + ch, left..left + cw]).to_owned(),
        sample.case_id.clone(),
        sample.slice_index,
    )
}

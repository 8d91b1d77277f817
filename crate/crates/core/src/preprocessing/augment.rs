use ndarray::{s, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SliceSample;
use crate::error::{Error, Result};

/// Training-time augmentation. Spatial transforms act on image and label
/// together; intensity transforms act on the image only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Flip probability for each in-plane axis.
    pub p_flip: f64,
    /// Rotation angle is drawn from `±rotation_max_deg`.
    pub rotation_max_deg: f64,
    pub scale_range: (f64, f64),
    /// Gaussian noise sigma in normalized intensity units.
    pub noise_std: f64,
    /// Multiplicative intensity factor range.
    pub intensity_scale_range: (f64, f64),
    /// Additive intensity offset range.
    pub intensity_shift_range: (f64, f64),
    pub p_patch_shuffle: f64,
    pub shuffle_patch_px: usize,
    /// Patches permuted per shuffle, taken from one local region.
    pub shuffle_max_patches: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_flip: 0.5,
            rotation_max_deg: 15.0,
            scale_range: (0.9, 1.1),
            noise_std: 0.05,
            intensity_scale_range: (0.9, 1.1),
            intensity_shift_range: (-0.1, 0.1),
            p_patch_shuffle: 0.2,
            shuffle_patch_px: 16,
            shuffle_max_patches: 8,
        }
    }
}

impl AugmentConfig {
    /// A configuration that leaves samples untouched.
    pub fn identity() -> Self {
        Self {
            p_flip: 0.0,
            rotation_max_deg: 0.0,
            scale_range: (1.0, 1.0),
            noise_std: 0.0,
            intensity_scale_range: (1.0, 1.0),
            intensity_shift_range: (0.0, 0.0),
            p_patch_shuffle: 0.0,
            shuffle_patch_px: 16,
            shuffle_max_patches: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_flip", self.p_flip),
            ("p_patch_shuffle", self.p_patch_shuffle),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::arg(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        for (name, (lo, hi)) in [
            ("scale_range", self.scale_range),
            ("intensity_scale_range", self.intensity_scale_range),
            ("intensity_shift_range", self.intensity_shift_range),
        ] {
            if !(lo <= hi) {
                return Err(Error::arg(format!("{name} must satisfy lo <= hi")));
            }
        }
        if self.scale_range.0 <= 0.0 {
            return Err(Error::arg("scale_range must be positive"));
        }
        if self.rotation_max_deg < 0.0 || self.noise_std < 0.0 {
            return Err(Error::arg(
                "rotation_max_deg and noise_std must be non-negative",
            ));
        }
        Ok(())
    }
}

fn draw<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo < hi {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Reverses `sample` along in-plane axis 0 (rows) or 1 (columns).
pub fn flip(sample: &SliceSample, axis: usize) -> SliceSample {
    assert!(axis < 2, "in-plane axis must be 0 or 1");
    let mut image = sample.image.clone();
    image.invert_axis(Axis(axis + 1));
    let mut label = sample.label.clone();
    label.invert_axis(Axis(axis));
    SliceSample {
        image: image.as_standard_layout().to_owned(),
        label: label.as_standard_layout().to_owned(),
        case_id: sample.case_id.clone(),
        slice_index: sample.slice_index,
    }
}

/// Applies the augmentation pipeline: flips, rotation + scaling about the
/// patch centre, Gaussian noise, intensity scale/shift, local patch shuffle,
/// then clamps the image back into `[0, 1]`.
pub fn augment<R: Rng + ?Sized>(
    sample: &SliceSample,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<SliceSample> {
    cfg.validate()?;
    let mut out = sample.clone();
    for axis in 0..2 {
        if rng.random_bool(cfg.p_flip) {
            out = flip(&out, axis);
        }
    }

    let angle = if cfg.rotation_max_deg > 0.0 {
        rng.random_range(-cfg.rotation_max_deg..=cfg.rotation_max_deg)
            .to_radians()
    } else {
        0.0
    };
    let scale = draw(rng, cfg.scale_range);
    if angle != 0.0 || scale != 1.0 {
        let (image, label) = rotate_scale(&out.image, &out.label, angle, scale);
        out.image = image;
        out.label = label;
    }

    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::arg(e.to_string()))?;
        for v in out.image.iter_mut() {
            *v += normal.sample(rng) as f32;
        }
    }
    let factor = draw(rng, cfg.intensity_scale_range) as f32;
    let shift = draw(rng, cfg.intensity_shift_range) as f32;
    if factor != 1.0 || shift != 0.0 {
        out.image.mapv_inplace(|v| v * factor + shift);
    }
    if rng.random_bool(cfg.p_patch_shuffle) {
        shuffle_patches(
            &mut out.image,
            cfg.shuffle_patch_px,
            cfg.shuffle_max_patches,
            rng,
        );
    }
    out.image.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(out)
}

/// Inverse-maps every output pixel through the rotation/scale about the
/// centre. Image: bilinear, label: nearest neighbour; outside is zero.
fn rotate_scale(
    image: &Array3<f32>,
    label: &Array2<u8>,
    angle: f64,
    scale: f64,
) -> (Array3<f32>, Array2<u8>) {
    let (c, h, w) = image.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let mut img = Array3::zeros((c, h, w));
    let mut lab = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sy = (cos * dy + sin * dx) / scale + cy;
            let sx = (-sin * dy + cos * dx) / scale + cx;

            let (ny, nx) = (sy.round(), sx.round());
            if ny >= 0.0 && nx >= 0.0 && (ny as usize) < h && (nx as usize) < w {
                lab[[y, x]] = label[[ny as usize, nx as usize]];
            }

            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
            let taps = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x0 + 1.0, (1.0 - fy) * fx),
                (y0 + 1.0, x0, fy * (1.0 - fx)),
                (y0 + 1.0, x0 + 1.0, fy * fx),
            ];
            for ch in 0..c {
                let mut acc = 0.0f32;
                for &(ty, tx, wt) in &taps {
                    if wt != 0.0 && ty >= 0.0 && tx >= 0.0 && (ty as usize) < h && (tx as usize) < w
                    {
                        acc += wt * image[[ch, ty as usize, tx as usize]];
                    }
                }
                img[[ch, y, x]] = acc;
            }
        }
    }
    (img, lab)
}

/// Permutes up to `max_patches` square patches inside one randomly placed
/// region (a grid of at most two patch rows).
fn shuffle_patches<R: Rng + ?Sized>(
    image: &mut Array3<f32>,
    patch: usize,
    max_patches: usize,
    rng: &mut R,
) {
    let (_, h, w) = image.dim();
    if patch == 0 || max_patches < 2 || h < patch || w < patch {
        return;
    }
    let rows = (h / patch).min(2);
    let cols = (w / patch).min(max_patches / rows);
    if rows * cols < 2 {
        return;
    }
    let top = rng.random_range(0..=h - rows * patch);
    let left = rng.random_range(0..=w - cols * patch);
    let cells: Vec<(usize, usize)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (top + r * patch, left + c * patch)))
        .collect();
    let mut order = cells.clone();
    order.shuffle(rng);
    let source = image.clone();
    for (&(dy, dx), &(sy, sx)) in cells.iter().zip(order.iter()) {
        image
            .slice_mut(s![.., dy..dy + patch, dx..dx + patch])
            .assign(&source.slice(s![.., sy..sy + patch, sx..sx + patch]));
    }
}

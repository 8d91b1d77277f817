use std::f64::consts::PI;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_spacing, Mask, Spacing, Volume};
use crate::error::{Error, Result};

/// Parameters of a synthetic head-CT-like phantom with hyperdense lesions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// `(rows, columns, slices)`.
    pub shape: [usize; 3],
    pub n_lesions: usize,
    pub lesion_hu_range: (f32, f32),
    pub background_hu_range: (f32, f32),
    pub lesion_radius_range_mm: (f64, f64),
    pub spacing: Spacing,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            shape: [64, 64, 16],
            n_lesions: 3,
            lesion_hu_range: (50.0, 90.0),
            background_hu_range: (0.0, 40.0),
            lesion_radius_range_mm: (2.5, 6.0),
            spacing: [0.46, 0.46, 5.0],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) {
            return Err(Error::arg(format!(
                "shape must be positive, got {:?}",
                self.shape
            )));
        }
        check_spacing(self.spacing)?;
        let (blo, bhi) = self.background_hu_range;
        let (llo, lhi) = self.lesion_hu_range;
        if blo > bhi || llo > lhi {
            return Err(Error::arg("HU ranges must satisfy lo <= hi"));
        }
        if llo <= bhi {
            return Err(Error::arg(format!(
                "lesion HU range {:?} must lie above background range {:?}",
                self.lesion_hu_range, self.background_hu_range
            )));
        }
        let (rlo, rhi) = self.lesion_radius_range_mm;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::arg(format!(
                "lesion radius range {:?} must satisfy 0 < lo <= hi",
                self.lesion_radius_range_mm
            )));
        }
        Ok(())
    }
}

struct Wave {
    freq: [f64; 3],
    phase: f64,
    amp: f64,
}

/// Generates a phantom: textured background plus `n_lesions` axis-aligned
/// ellipsoids of higher attenuation. The mask marks lesion voxels exactly.
pub fn generate_synthetic_case(spec: &SyntheticSpec, seed: u64) -> Result<(Volume, Mask)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [h, w, s] = spec.shape;
    let (blo, bhi) = spec.background_hu_range;

    // A few long-wavelength sinusoids give smooth low-frequency texture.
    let waves: Vec<Wave> = (0..3)
        .map(|_| Wave {
            freq: [
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
                rng.random_range(0.0..1.0),
            ],
            phase: rng.random_range(0.0..2.0 * PI),
            amp: rng.random_range(0.5..1.0),
        })
        .collect();
    let amp_total: f64 = waves.iter().map(|w| w.amp).sum();
    let mut data = Array3::<f32>::zeros((h, w, s));
    for ((i, j, k), v) in data.indexed_iter_mut() {
        let pos = [
            i as f64 / h as f64,
            j as f64 / w as f64,
            k as f64 / s as f64,
        ];
        let wave: f64 = waves
            .iter()
            .map(|wv| {
                let arg = (0..3).map(|d| wv.freq[d] * pos[d]).sum::<f64>();
                wv.amp * (2.0 * PI * arg + wv.phase).sin()
            })
            .sum();
        let texture = 0.5 + 0.5 * wave / amp_total;
        let noise: f64 = rng.random();
        let t = (0.5 * noise + 0.5 * texture).clamp(0.0, 1.0) as f32;
        *v = blo + (bhi - blo) * t;
    }

    let mut mask = Array3::<u8>::zeros((h, w, s));
    let (rlo, rhi) = spec.lesion_radius_range_mm;
    for _ in 0..spec.n_lesions {
        let center = [
            rng.random_range(0..h) as f64,
            rng.random_range(0..w) as f64,
            rng.random_range(0..s) as f64,
        ];
        // semi-axes in voxel units
        let axes: Vec<f64> = (0..3)
            .map(|d| rng.random_range(rlo..=rhi) / spec.spacing[d])
            .collect();
        let lo: Vec<usize> = (0..3)
            .map(|d| (center[d] - axes[d]).floor().max(0.0) as usize)
            .collect();
        let hi = [
            ((center[0] + axes[0]).ceil() as usize).min(h - 1),
            ((center[1] + axes[1]).ceil() as usize).min(w - 1),
            ((center[2] + axes[2]).ceil() as usize).min(s - 1),
        ];
        for i in lo[0]..=hi[0] {
            for j in lo[1]..=hi[1] {
                for k in lo[2]..=hi[2] {
                    let r2 = (i as f64 - center[0]).powi(2) / axes[0].powi(2)
                        + (j as f64 - center[1]).powi(2) / axes[1].powi(2)
                        + (k as f64 - center[2]).powi(2) / axes[2].powi(2);
                    if r2 <= 1.0 {
                        mask[[i, j, k]] = 1;
                    }
                }
            }
        }
    }

    let (llo, lhi) = spec.lesion_hu_range;
    for (v, &m) in data.iter_mut().zip(mask.iter()) {
        if m == 1 {
            *v = rng.random_range(llo..=lhi);
        }
    }

    let case_id = format!("synthetic_{seed}");
    Ok((
        Volume::new(data, spec.spacing, case_id.clone())?,
        Mask::new(mask, spec.spacing, case_id)?,
    ))
}

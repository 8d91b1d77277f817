//! Slice-by-slice volume prediction, mean ensembling and thresholding.

use std::path::{Path, PathBuf};

use candle_core::Tensor;
use ndarray::{s, Array3, Axis};

use crate::error::{Error, Result};
use crate::network::{load_checkpoint, CheckpointMeta, SegNet, SPATIAL_DIVISOR};
use crate::preprocessing::crop::pad_amounts;
use crate::preprocessing::{build_input, InputStrategy};
use crate::volume_io::{load_volume, save_probability, Mask, Spacing, Volume};

/// Foreground probability per voxel, on the grid of the source volume.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVolume {
    pub probs: Array3<f32>,
    pub spacing: Spacing,
    pub case_id: String,
}

impl ProbabilityVolume {
    /// Fails unless every value lies in `[0, 1]`.
    pub fn new(probs: Array3<f32>, spacing: Spacing, case_id: impl Into<String>) -> Result<Self> {
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::arg("probabilities must lie in [0, 1]"));
        }
        Ok(Self {
            probs,
            spacing,
            case_id: case_id.into(),
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.probs.dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictOptions {
    /// Slices are padded symmetrically to at least this size, rounded up to
    /// a multiple of [`SPATIAL_DIVISOR`], and cropped back afterwards.
    pub min_size: [usize; 2],
    /// Slices per forward pass.
    pub batch_size: usize,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            min_size: [384, 384],
            batch_size: 4,
        }
    }
}

impl PredictOptions {
    /// Pads to the patch size a checkpoint was trained on.
    pub fn for_checkpoint(meta: &CheckpointMeta) -> Self {
        Self {
            min_size: meta.input_size,
            ..Self::default()
        }
    }

    fn padded(&self, h: usize, w: usize) -> [usize; 2] {
        let up = |n: usize| n.div_ceil(SPATIAL_DIVISOR) * SPATIAL_DIVISOR;
        [up(h.max(self.min_size[0])), up(w.max(self.min_size[1]))]
    }
}

/// [`predict_volume_with`] using the default options.
pub fn predict_volume(
    model: &SegNet,
    volume: &Volume,
    strategy: &InputStrategy,
) -> Result<ProbabilityVolume> {
    predict_volume_with(model, volume, strategy, &PredictOptions::default())
}

/// Runs every slice through the model in inference mode and restacks the
/// foreground probabilities. Geometry (shape, spacing) is never resampled.
pub fn predict_volume_with(
    model: &SegNet,
    volume: &Volume,
    strategy: &InputStrategy,
    opts: &PredictOptions,
) -> Result<ProbabilityVolume> {
    strategy.validate()?;
    if strategy.channels() != model.in_channels() {
        return Err(Error::Config(format!(
            "strategy builds {} channels but the model expects {}",
            strategy.channels(),
            model.in_channels()
        )));
    }
    if opts.batch_size == 0 {
        return Err(Error::arg("batch_size must be positive"));
    }
    let (h, w, n_slices) = volume.shape();
    let [ph, pw] = opts.padded(h, w);
    let (top, _) = pad_amounts(h, ph);
    let (left, _) = pad_amounts(w, pw);
    let c = strategy.channels();
    let mut probs = Array3::<f32>::zeros((h, w, n_slices));

    let indices: Vec<usize> = (0..n_slices).collect();
    for chunk in indices.chunks(opts.batch_size) {
        let mut batch = Array3::<f32>::zeros((chunk.len() * c, ph, pw));
        for (b, &k) in chunk.iter().enumerate() {
            let input = build_input(volume, k, strategy)?;
            batch
                .slice_mut(s![b * c..(b + 1) * c, top..top + h, left..left + w])
                .assign(&input);
        }
        let flat: Vec<f32> = batch.into_iter().collect();
        let x = Tensor::from_vec(flat, (chunk.len(), c, ph, pw), &candle_core::Device::Cpu)?;
        let p = model.predict_probs(&x)?;
        let k_classes = p.dim(1)?;
        // foreground = every class but background
        let fg = p
            .narrow(1, 1, k_classes - 1)?
            .sum(1)?
            .to_dtype(candle_core::DType::F32)?;
        let fg: Vec<f32> = fg.flatten_all()?.to_vec1()?;
        let fg = Array3::from_shape_vec((chunk.len(), ph, pw), fg)
            .map_err(|e| Error::shape(e.to_string()))?;
        for (b, &k) in chunk.iter().enumerate() {
            probs
                .index_axis_mut(Axis(2), k)
                .assign(&fg.slice(s![b, top..top + h, left..left + w]));
        }
    }
    probs.mapv_inplace(|p| p.clamp(0.0, 1.0));
    ProbabilityVolume::new(probs, volume.spacing, volume.case_id.clone())
}

/// A checkpoint loaded once and applied to many volumes with its own input
/// strategy and training patch size.
pub struct EnsembleMember {
    pub path: PathBuf,
    pub model: SegNet,
    pub meta: CheckpointMeta,
}

impl EnsembleMember {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let (model, meta) = load_checkpoint(&path)?;
        Ok(Self { path, model, meta })
    }

    pub fn predict(&self, volume: &Volume) -> Result<ProbabilityVolume> {
        predict_volume_with(
            &self.model,
            volume,
            &self.meta.strategy,
            &PredictOptions::for_checkpoint(&self.meta),
        )
    }

    /// Cache file for this member's prediction of `case_id` under `dir`.
    pub fn cache_path(&self, dir: impl AsRef<Path>, case_id: &str) -> PathBuf {
        let tag: String = self
            .path
            .to_string_lossy()
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        dir.as_ref()
            .join(tag)
            .join(format!("{case_id}_prob.nii.gz"))
    }

    /// Prediction read from the cache when present; computed and written otherwise.
    pub fn predict_cached(
        &self,
        volume: &Volume,
        dir: impl AsRef<Path>,
    ) -> Result<ProbabilityVolume> {
        let path = self.cache_path(dir, &volume.case_id);
        if path.exists() {
            let cached = load_volume(&path)?;
            if cached.shape() == volume.shape() {
                return ProbabilityVolume::new(cached.data, volume.spacing, volume.case_id.clone());
            }
        }
        let pv = self.predict(volume)?;
        save_probability(&pv.probs, volume, &path)?;
        Ok(pv)
    }
}

/// Voxelwise arithmetic mean of the members.
///
/// Each voxel's values are sorted before summing, so the result does not
/// depend on member order, and it is clamped into the members' range.
pub fn ensemble_mean(members: &[ProbabilityVolume]) -> Result<ProbabilityVolume> {
    let first = members
        .first()
        .ok_or_else(|| Error::arg("ensemble has no members"))?;
    for m in &members[1..] {
        if m.shape() != first.shape() {
            return Err(Error::arg(format!(
                "member shapes differ: {:?} vs {:?}",
                m.shape(),
                first.shape()
            )));
        }
        if m.case_id != first.case_id {
            return Err(Error::arg(format!(
                "members describe different cases: {} vs {}",
                m.case_id, first.case_id
            )));
        }
    }
    if members.len() == 1 {
        return Ok(first.clone());
    }
    let n = members.len() as f64;
    let mut values = vec![0f32; members.len()];
    let probs = Array3::from_shape_fn(first.shape(), |idx| {
        for (v, m) in values.iter_mut().zip(members) {
            *v = m.probs[idx];
        }
        values.sort_by(f32::total_cmp);
        let mean = (values.iter().map(|&v| f64::from(v)).sum::<f64>() / n) as f32;
        mean.clamp(values[0], values[values.len() - 1])
    });
    Ok(ProbabilityVolume {
        probs,
        spacing: first.spacing,
        case_id: first.case_id.clone(),
    })
}

/// Voxels with probability `>= threshold` become foreground.
pub fn binarize(pv: &ProbabilityVolume, threshold: f32) -> Result<Mask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::arg(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    Ok(Mask {
        data: pv.probs.mapv(|p| u8::from(p >= threshold)),
        spacing: pv.spacing,
        case_id: pv.case_id.clone(),
    })
}

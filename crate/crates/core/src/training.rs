//! Per-fold optimisation (AdamW, cosine-annealed learning rate, best-Dice
//! checkpointing) and the k-fold cross-validation driver.
//!
//! Training is single-threaded on the data side and fully seeded: the same
//! manifest, folds and config give the same checkpoints and reports.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{binarize, predict_volume_with, PredictOptions};
use crate::loss::{deep_supervision_loss, LossConfig};
use crate::metrics::dice;
use crate::network::{
    build_model, save_checkpoint, CheckpointMeta, NetworkConfig, SegNet, SPATIAL_DIVISOR,
};
use crate::preprocessing::{
    augment, foreground_biased_crop, slice_sample, AugmentConfig, CropConfig, InputStrategy,
    SliceSample,
};
use crate::volume_io::{make_folds, FoldAssignment, Manifest, Mask, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Training slices drawn per case per epoch.
    pub slices_per_case: usize,
    pub strategy: InputStrategy,
    pub crop: CropConfig,
    pub aug: AugmentConfig,
    pub loss: LossConfig,
    pub net: NetworkConfig,
    pub checkpoint_dir: PathBuf,
    /// 1-based epochs after which an extra checkpoint is kept.
    pub snapshot_epochs: Vec<usize>,
    /// Probability threshold used when scoring validation volumes.
    pub val_threshold: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 2e-4,
            weight_decay: 1e-5,
            epochs: 1600,
            batch_size: 32,
            seed: 0,
            slices_per_case: 4,
            strategy: InputStrategy::adjacent_slices(),
            crop: CropConfig::default(),
            aug: AugmentConfig::default(),
            loss: LossConfig::default(),
            net: NetworkConfig::default(),
            checkpoint_dir: PathBuf::from("checkpoints"),
            snapshot_epochs: Vec::new(),
            val_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative".into());
        }
        if self.epochs == 0 || self.batch_size == 0 || self.slices_per_case == 0 {
            return bad("epochs, batch_size and slices_per_case must be at least 1".into());
        }
        if self.crop.size.iter().any(|s| s % SPATIAL_DIVISOR != 0) {
            return bad(format!(
                "crop size {:?} must be a multiple of {SPATIAL_DIVISOR}",
                self.crop.size
            ));
        }
        if !(self.val_threshold > 0.0 && self.val_threshold < 1.0) {
            return bad("val_threshold must lie in (0, 1)".into());
        }
        self.strategy.validate()?;
        if self.net.in_channels != self.strategy.channels() {
            return bad(format!(
                "network takes {} channels but the strategy builds {}",
                self.net.in_channels,
                self.strategy.channels()
            ));
        }
        let cfg_err = |e: Error| Error::Config(e.to_string());
        self.net.validate().map_err(cfg_err)?;
        self.crop.validate().map_err(cfg_err)?;
        self.aug.validate().map_err(cfg_err)?;
        self.loss.validate().map_err(cfg_err)?;
        Ok(())
    }
}

/// `lr0 · ½(1 + cos(π · epoch / total_epochs))` for `0 <= epoch <= total_epochs`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> Result<f64> {
    if total_epochs == 0 || epoch > total_epochs {
        return Err(Error::arg(format!(
            "epoch {epoch} outside 0..={total_epochs}"
        )));
    }
    let t = epoch as f64 / total_epochs as f64;
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub best_val_dice: f64,
    pub best_epoch: usize,
    pub checkpoint_path: PathBuf,
    pub final_checkpoint_path: PathBuf,
    pub snapshot_paths: Vec<PathBuf>,
    pub history: Vec<EpochRecord>,
}

/// Seed of fold `fold`'s model initialisation and sampling streams.
fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ (fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn fold_dir(checkpoint_dir: &Path, fold: usize) -> PathBuf {
    checkpoint_dir.join(format!("fold{fold}"))
}

fn load_cases(manifest: &Manifest, ids: &[String]) -> Result<Vec<(Volume, Mask)>> {
    ids.iter().map(|id| manifest.load_case(id)).collect()
}

/// Mean full-volume Dice of the thresholded predictions.
pub fn validation_dice(
    model: &SegNet,
    cases: &[(Volume, Mask)],
    strategy: &InputStrategy,
    opts: &PredictOptions,
    threshold: f32,
) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::Config("no validation cases".into()));
    }
    let mut total = 0.0;
    for (volume, mask) in cases {
        let probs = predict_volume_with(model, volume, strategy, opts)?;
        total += dice(&binarize(&probs, threshold)?, mask)?;
    }
    Ok(total / cases.len() as f64)
}

fn make_sample<R: Rng>(
    case: &(Volume, Mask),
    slice: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<SliceSample> {
    let sample = slice_sample(&case.0, &case.1.data, slice, &cfg.strategy)?;
    let sample = foreground_biased_crop(&sample, &cfg.crop, rng)?;
    augment(&sample, &cfg.aug, rng)
}

fn to_batch(samples: &[SliceSample]) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = samples[0].image.dim();
    let b = samples.len();
    let mut images = Vec::with_capacity(b * c * h * w);
    let mut labels = Vec::with_capacity(b * h * w);
    for s in samples {
        images.extend(s.image.iter().copied());
        labels.extend(s.label.iter().map(|&v| u32::from(v)));
    }
    Ok((
        Tensor::from_vec(images, (b, c, h, w), &Device::Cpu)?,
        Tensor::from_vec(labels, (b, h, w), &Device::Cpu)?,
    ))
}

fn save(
    model: &SegNet,
    cfg: &TrainConfig,
    fold: usize,
    epoch: usize,
    val_dice: f64,
    path: &Path,
) -> Result<()> {
    let mut meta = CheckpointMeta::new(
        cfg.net.clone(),
        cfg.strategy.clone(),
        cfg.crop.size,
        model.seed(),
    );
    meta.fold = Some(fold);
    meta.epoch = Some(epoch);
    meta.val_dice = Some(val_dice);
    save_checkpoint(model, &meta, path)
}

/// Trains on every case outside `fold` and validates on the cases inside it.
///
/// Writes `fold{k}/best.safetensors` whenever validation Dice improves,
/// `fold{k}/epoch{e}.safetensors` for each snapshot epoch,
/// `fold{k}/final.safetensors` and `fold{k}/history.json`.
pub fn train_fold(
    manifest: &Manifest,
    folds: &FoldAssignment,
    fold: usize,
    cfg: &TrainConfig,
) -> Result<FoldResult> {
    if fold >= folds.k {
        return Err(Error::arg(format!(
            "fold {fold} out of range for k = {}",
            folds.k
        )));
    }
    cfg.validate()?;
    if manifest.is_empty() {
        return Err(Error::Config("manifest has no cases".into()));
    }
    let train_ids = folds.cases_not_in(fold);
    let val_ids = folds.cases_in(fold);
    if train_ids.is_empty() {
        return Err(Error::Config(format!(
            "fold {fold} leaves no training cases"
        )));
    }
    if val_ids.is_empty() {
        return Err(Error::Config(format!(
            "fold {fold} has no validation cases"
        )));
    }
    let train = load_cases(manifest, &train_ids)?;
    let val = load_cases(manifest, &val_ids)?;

    let seed = fold_seed(cfg.seed, fold);
    let model = build_model(&cfg.net, seed, DType::F32)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A5A_5A5A);
    let mut opt = AdamW::new(
        model.trainable_vars(),
        ParamsAdamW {
            lr: cfg.lr0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        },
    )?;
    let predict_opts = PredictOptions {
        min_size: cfg.crop.size,
        batch_size: 4,
    };

    let dir = fold_dir(&cfg.checkpoint_dir, fold);
    std::fs::create_dir_all(&dir)?;
    let best_path = dir.join("best.safetensors");
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut snapshot_paths = Vec::new();
    let mut best: Option<(f64, usize)> = None;

    info!(
        "fold {fold}: {} training / {} validation cases, {} parameters",
        train.len(),
        val.len(),
        model.param_count()
    );
    for epoch in 1..=cfg.epochs {
        let lr = cosine_lr(epoch - 1, cfg.epochs, cfg.lr0)?;
        opt.set_learning_rate(lr);

        let mut plan: Vec<(usize, usize)> = Vec::with_capacity(train.len() * cfg.slices_per_case);
        for (ci, case) in train.iter().enumerate() {
            for _ in 0..cfg.slices_per_case {
                plan.push((ci, rng.random_range(0..case.0.n_slices())));
            }
        }
        plan.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut steps = 0;
        for (step, chunk) in plan.chunks(cfg.batch_size).enumerate() {
            let samples = chunk
                .iter()
                .map(|&(ci, k)| make_sample(&train[ci], k, cfg, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let (x, y) = to_batch(&samples)?;
            let outputs = model.forward(&x, true)?;
            let loss = deep_supervision_loss(&outputs, &y, &cfg.loss)?;
            let value = f64::from(loss.to_dtype(DType::F32)?.to_scalar::<f32>()?);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step, value });
            }
            opt.backward_step(&loss)?;
            loss_sum += value;
            steps += 1;
        }

        let val_dice = validation_dice(
            &model,
            &val,
            &cfg.strategy,
            &predict_opts,
            cfg.val_threshold,
        )?;
        let train_loss = loss_sum / steps as f64;
        info!(
            "fold {fold} epoch {epoch}/{}: lr {lr:.3e} loss {train_loss:.4} val dice {val_dice:.4}",
            cfg.epochs
        );
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_dice,
        });

        if best.is_none_or(|(d, _)| val_dice > d) {
            best = Some((val_dice, epoch));
            save(&model, cfg, fold, epoch, val_dice, &best_path)?;
        }
        if cfg.snapshot_epochs.contains(&epoch) {
            let path = dir.join(format!("epoch{epoch}.safetensors"));
            save(&model, cfg, fold, epoch, val_dice, &path)?;
            snapshot_paths.push(path);
        }
    }

    let last = history.last().expect("at least one epoch");
    let final_path = dir.join("final.safetensors");
    save(&model, cfg, fold, last.epoch, last.val_dice, &final_path)?;
    std::fs::write(
        dir.join("history.json"),
        serde_json::to_string_pretty(&history)?,
    )?;

    let (best_val_dice, best_epoch) = best.expect("at least one epoch");
    Ok(FoldResult {
        fold,
        best_val_dice,
        best_epoch,
        checkpoint_path: best_path,
        final_checkpoint_path: final_path,
        snapshot_paths,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub best_val_dice: f64,
    pub best_epoch: usize,
    /// Relative to the checkpoint directory.
    pub checkpoint: PathBuf,
    pub validation_cases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub folds: Vec<FoldSummary>,
    pub mean_dice: f64,
}

/// Splits the manifest into `k` folds with `cfg.seed` and trains every fold.
pub fn run_cross_validation(
    manifest: &Manifest,
    k: usize,
    cfg: &TrainConfig,
) -> Result<(Vec<FoldResult>, CvReport)> {
    let folds = make_folds(&manifest.case_ids(), k, cfg.seed)?;
    run_cross_validation_with_folds(manifest, &folds, cfg)
}

/// Trains every fold of `folds` and writes `cv_report.json` into the
/// checkpoint directory.
pub fn run_cross_validation_with_folds(
    manifest: &Manifest,
    folds: &FoldAssignment,
    cfg: &TrainConfig,
) -> Result<(Vec<FoldResult>, CvReport)> {
    if folds.k < 2 {
        return Err(Error::arg("cross-validation needs k >= 2"));
    }
    let results = (0..folds.k)
        .map(|fold| train_fold(manifest, folds, fold, cfg))
        .collect::<Result<Vec<_>>>()?;
    let summaries: Vec<FoldSummary> = results
        .iter()
        .map(|r| FoldSummary {
            fold: r.fold,
            best_val_dice: r.best_val_dice,
            best_epoch: r.best_epoch,
            checkpoint: r
                .checkpoint_path
                .strip_prefix(&cfg.checkpoint_dir)
                .unwrap_or(&r.checkpoint_path)
                .to_path_buf(),
            validation_cases: folds.cases_in(r.fold),
        })
        .collect();
    let report = CvReport {
        k: folds.k,
        mean_dice: summaries.iter().map(|s| s.best_val_dice).sum::<f64>() / summaries.len() as f64,
        folds: summaries,
    };
    std::fs::create_dir_all(&cfg.checkpoint_dir)?;
    std::fs::write(
        cfg.checkpoint_dir.join("cv_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok((results, report))
}

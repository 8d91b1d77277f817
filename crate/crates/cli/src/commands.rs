use std::path::{Path, PathBuf};

use hemoseg::inference::{binarize, ensemble_mean, EnsembleMember, ProbabilityVolume};
use hemoseg::metrics::{evaluate_case, MetricsSummary};
use hemoseg::preprocessing::{InputStrategy, StrategyKind};
use hemoseg::training::{run_cross_validation_with_folds, train_fold, CvReport, TrainConfig};
use hemoseg::volume_io::{
    generate_synthetic_case, load_mask, load_volume, make_folds, save_mask, save_probability,
    save_volume, FoldAssignment, Manifest, SyntheticSpec, Volume,
};
use log::info;
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::run_manifest::RunManifest;
use crate::{
    CaseSelection, CliError, Command, Common, CrossValidateArgs, EnsembleArgs, EvaluateArgs,
    PredictArgs, ReportArgs, SplitArgs, SynthArgs, TrainArgs, TrainOverrides,
};

type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::CrossValidate(a) => cross_validate(a),
        Command::Predict(a) => predict(a),
        Command::Ensemble(a) => ensemble(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn out_dir(common: &Common, cfg: &PipelineConfig) -> Result<PathBuf> {
    common
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| usage("--out is required (or set `out` in the config)"))
}

fn existing(path: PathBuf, what: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn manifest_path(flag: &Option<PathBuf>, cfg: &PipelineConfig) -> Result<PathBuf> {
    let path = flag
        .clone()
        .or_else(|| cfg.manifest.clone())
        .ok_or_else(|| usage("--manifest is required (or set `manifest` in the config)"))?;
    existing(path, "manifest")
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    if workers == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

/// Sets `strategy` and keeps the network's input width in step with it.
fn set_strategy(train: &mut TrainConfig, kind: StrategyKind) {
    train.strategy = InputStrategy::from_kind(kind);
    train.net.in_channels = train.strategy.channels();
}

fn apply_overrides(cfg: &mut PipelineConfig, o: &TrainOverrides) {
    if let Some(m) = &o.manifest {
        cfg.manifest = Some(m.clone());
    }
    let t = &mut cfg.train;
    if let Some(v) = o.epochs {
        t.epochs = v;
    }
    if let Some(v) = o.lr {
        t.lr0 = v;
    }
    if let Some(v) = o.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = o.seed {
        t.seed = v;
    }
    if let Some(v) = o.init_filters {
        t.net.init_filters = v;
    }
    if let Some(v) = o.crop_size {
        t.crop.size = [v, v];
    }
    if let Some(v) = &o.snapshot_epochs {
        t.snapshot_epochs = v.clone();
    }
    if let Some(s) = o.strategy {
        cfg.strategies = vec![s.into()];
    }
    let first = cfg
        .strategies
        .first()
        .copied()
        .unwrap_or(cfg.train.strategy.kind);
    set_strategy(&mut cfg.train, first);
}

fn strategy_dir_name(kind: StrategyKind) -> &'static str {
    match kind {
        StrategyKind::AdjacentSlices => "adjacent_slices",
        StrategyKind::MultiWindow => "multi_window",
        StrategyKind::Combined => "combined",
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = PipelineConfig::load_or_default(a.common.config.as_deref())?;
    let out = out_dir(&a.common, &cfg)?;
    if a.cases == 0 {
        return Err(usage("--cases must be at least 1"));
    }
    let mut spec = SyntheticSpec::default();
    if let Some(shape) = &a.shape {
        let [h, w, s] = shape[..] else {
            return Err(usage(format!(
                "--shape takes H,W,S, got {} values",
                shape.len()
            )));
        };
        spec.shape = [h, w, s];
    }
    if let Some(n) = a.lesions {
        spec.n_lesions = n;
    }
    spec.validate().map_err(|e| usage(e.to_string()))?;

    let mut manifest = Manifest::new(&out);
    let mut run = RunManifest::new("synth", cfg.hash()).seed("synth", a.seed);
    for i in 0..a.cases as u64 {
        let (volume, mask) = generate_synthetic_case(&spec, a.seed + i)?;
        let image = PathBuf::from("images").join(format!("{}.nii.gz", volume.case_id));
        let label = PathBuf::from("labels").join(format!("{}.nii.gz", volume.case_id));
        save_volume(&volume, out.join(&image))?;
        save_mask(&mask, &volume, out.join(&label))?;
        run.artifacts.push(out.join(&image));
        run.artifacts.push(out.join(&label));
        manifest.insert(volume.case_id.clone(), image, label);
    }
    let manifest_file = out.join("manifest.json");
    manifest.save(&manifest_file)?;
    run.artifacts.push(manifest_file);
    info!("wrote {} synthetic cases to {}", a.cases, out.display());
    Ok(run.write(&out)?)
}

fn split(a: SplitArgs) -> Result<()> {
    let mut cfg = PipelineConfig::load_or_default(a.common.config.as_deref())?;
    if let Some(k) = a.k {
        cfg.folds.k = k;
    }
    if let Some(s) = a.seed {
        cfg.folds.seed = s;
    }
    cfg.validate()?;
    let out = out_dir(&a.common, &cfg)?;
    let manifest = Manifest::load(manifest_path(&a.manifest, &cfg)?)?;
    let folds = make_folds(&manifest.case_ids(), cfg.folds.k, cfg.folds.seed)?;
    std::fs::create_dir_all(&out)?;
    let path = out.join("folds.json");
    folds.save(&path)?;
    info!("fold sizes {:?}", folds.fold_sizes());
    let mut run = RunManifest::new("split", cfg.hash()).seed("folds", cfg.folds.seed);
    run.artifacts.push(path);
    Ok(run.write(&out)?)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = PipelineConfig::load_or_default(a.common.config.as_deref())?;
    apply_overrides(&mut cfg, &a.train);
    let out = out_dir(&a.common, &cfg)?;
    cfg.train.checkpoint_dir = out.clone();
    cfg.validate()?;
    let manifest = Manifest::load(manifest_path(&cfg.manifest, &cfg)?)?;
    let folds = match &a.folds {
        Some(p) => FoldAssignment::load(existing(p.clone(), "folds file")?)?,
        None => make_folds(&manifest.case_ids(), cfg.folds.k, cfg.folds.seed)?,
    };
    if a.fold >= folds.k {
        return Err(usage(format!(
            "--fold {} out of range for k = {}",
            a.fold, folds.k
        )));
    }
    let result = train_fold(&manifest, &folds, a.fold, &cfg.train)?;
    info!(
        "fold {}: best validation Dice {:.4} at epoch {}",
        result.fold, result.best_val_dice, result.best_epoch
    );
    let mut run = RunManifest::new("train", cfg.hash())
        .seed("train", cfg.train.seed)
        .seed("folds", folds.seed);
    run.artifacts.push(result.checkpoint_path.clone());
    run.artifacts.push(result.final_checkpoint_path.clone());
    run.artifacts.extend(result.snapshot_paths.iter().cloned());
    run.artifacts
        .push(hemoseg::training::fold_dir(&out, a.fold).join("history.json"));
    Ok(run.write(&out)?)
}

fn cross_validate(a: CrossValidateArgs) -> Result<()> {
    let mut cfg = PipelineConfig::load_or_default(a.common.config.as_deref())?;
    apply_overrides(&mut cfg, &a.train);
    if let Some(k) = a.k {
        cfg.folds.k = k;
    }
    let out = out_dir(&a.common, &cfg)?;
    cfg.validate()?;
    let manifest = Manifest::load(manifest_path(&cfg.manifest, &cfg)?)?;
    let folds = make_folds(&manifest.case_ids(), cfg.folds.k, cfg.folds.seed)?;
    std::fs::create_dir_all(&out)?;
    let folds_path = out.join("folds.json");
    folds.save(&folds_path)?;

    let mut run = RunManifest::new("cross-validate", cfg.hash())
        .seed("train", cfg.train.seed)
        .seed("folds", cfg.folds.seed);
    run.artifacts.push(folds_path);
    let single = cfg.strategies.len() == 1;
    for &kind in &cfg.strategies {
        let mut train = cfg.train.clone();
        set_strategy(&mut train, kind);
        train.checkpoint_dir = if single {
            out.clone()
        } else {
            out.join(strategy_dir_name(kind))
        };
        let (results, report) = run_cross_validation_with_folds(&manifest, &folds, &train)?;
        info!(
            "{}: mean cross-validation Dice {:.4}",
            strategy_dir_name(kind),
            report.mean_dice
        );
        run.artifacts
            .push(train.checkpoint_dir.join("cv_report.json"));
        for r in results {
            run.artifacts.push(r.checkpoint_path);
            run.artifacts.push(r.final_checkpoint_path);
            run.artifacts.extend(r.snapshot_paths);
        }
    }
    Ok(run.write(&out)?)
}

/// Volumes named by `--image`, or by `--case`/manifest.
fn volume_sources(sel: &CaseSelection, cfg: &PipelineConfig) -> Result<Vec<Source>> {
    if !sel.images.is_empty() {
        if !sel.cases.is_empty() {
            return Err(usage("use either --image or --case, not both"));
        }
        return sel
            .images
            .iter()
            .map(|p| Ok(Source::File(existing(p.clone(), "image")?)))
            .collect();
    }
    let manifest = Manifest::load(manifest_path(&sel.manifest, cfg)?)?;
    let ids = if sel.cases.is_empty() {
        manifest.case_ids()
    } else {
        sel.cases.clone()
    };
    for id in &ids {
        if !manifest.cases.contains_key(id) {
            return Err(usage(format!("case {id:?} is not in the manifest")));
        }
    }
    Ok(ids
        .into_iter()
        .map(|id| Source::Case(manifest.clone(), id))
        .collect())
}

enum Source {
    File(PathBuf),
    Case(Manifest, String),
}

impl Source {
    fn load(&self) -> hemoseg::Result<Volume> {
        match self {
            Source::File(p) => load_volume(p),
            Source::Case(m, id) => m.load_image(id),
        }
    }
}

fn write_prediction(
    pv: &ProbabilityVolume,
    volume: &Volume,
    threshold: f32,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let prob_path = out.join(format!("{}_prob.nii.gz", volume.case_id));
    let mask_path = out.join(format!("{}_mask.nii.gz", volume.case_id));
    save_probability(&pv.probs, volume, &prob_path)?;
    save_mask(&binarize(pv, threshold)?, volume, &mask_path)?;
    Ok(vec![prob_path, mask_path])
}

fn check_threshold(t: f32) -> Result<f32> {
    if t > 0.0 && t < 1.0 {
        Ok(t)
    } else {
        Err(usage(format!("--threshold must lie in (0, 1), got {t}")))
    }
}

fn predict_with(
    members: &[EnsembleMember],
    sources: &[Source],
    cache: Option<&Path>,
    threshold: f32,
    out: &Path,
    workers: usize,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let written = pool(workers)?.install(|| {
        sources
            .par_iter()
            .map(|source| -> Result<Vec<PathBuf>> {
                let volume = source.load()?;
                let preds = members
                    .iter()
                    .map(|m| match cache {
                        Some(dir) => m.predict_cached(&volume, dir),
                        None => m.predict(&volume),
                    })
                    .collect::<hemoseg::Result<Vec<_>>>()?;
                let pv = ensemble_mean(&preds)?;
                info!("{}: {} member(s)", volume.case_id, members.len());
                write_prediction(&pv, &volume, threshold, out)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(written.into_iter().flatten().collect())
}

fn predict(a: PredictArgs) -> Result<()> {
    let cfg = PipelineConfig::load_or_default(a.common.config.as_deref())?;
    let out = out_dir(&a.common, &cfg)?;
    let threshold = check_threshold(a.threshold.unwrap_or(cfg.inference.threshold))?;
    let member = EnsembleMember::load(existing(a.checkpoint.clone(), "checkpoint")?)?;
    let sources = volume_sources(&a.select, &cfg)?;
    let cache = cfg.inference.probability_cache.as_deref();
    let mut run = RunManifest::new("predict", cfg.hash()).seed("model_init", member.meta.init_seed);
    run.artifacts = predict_with(
        &[member],
        &sources,
        cache,
        threshold,
        &out,
        a.common.workers,
    )?;
    Ok(run.write(&out)?)
}

fn ensemble(a: EnsembleArgs) -> Result<()> {
    let cfg = PipelineConfig::load_or_default(a.common.config.as_deref())?;
    let out = out_dir(&a.common, &cfg)?;
    let threshold = check_threshold(a.threshold.unwrap_or(cfg.inference.threshold))?;
    let members = a
        .checkpoints
        .iter()
        .map(|p| Ok(EnsembleMember::load(existing(p.clone(), "checkpoint")?)?))
        .collect::<Result<Vec<_>>>()?;
    let sources = volume_sources(&a.select, &cfg)?;
    let cache = a
        .cache
        .clone()
        .or_else(|| cfg.inference.probability_cache.clone());
    let mut run = RunManifest::new("ensemble", cfg.hash());
    for (i, m) in members.iter().enumerate() {
        run = run.seed(&format!("member{i}_init"), m.meta.init_seed);
    }
    run.artifacts = predict_with(
        &members,
        &sources,
        cache.as_deref(),
        threshold,
        &out,
        a.common.workers,
    )?;
    Ok(run.write(&out)?)
}

fn nifti_stem(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    name.strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .map(str::to_string)
}

fn prediction_for(dir: &Path, case_id: &str) -> Option<PathBuf> {
    [
        format!("{case_id}.nii.gz"),
        format!("{case_id}.nii"),
        format!("{case_id}_mask.nii.gz"),
        format!("{case_id}_mask.nii"),
    ]
    .iter()
    .map(|n| dir.join(n))
    .find(|p| p.exists())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let mut cfg = PipelineConfig::load_or_default(a.common.config.as_deref())?;
    if let Some(t) = a.tau {
        cfg.metrics.tau_mm = t;
    }
    if let Some(q) = a.hd_percentile {
        cfg.metrics.hd_percentile = q;
    }
    cfg.metrics.validate().map_err(|e| usage(e.to_string()))?;
    let out = out_dir(&a.common, &cfg)?;
    let gt_dir = existing(a.gt.clone(), "ground-truth directory")?;
    let pred_dir = existing(a.pred.clone(), "prediction directory")?;

    let mut gt_files: Vec<(String, PathBuf)> = std::fs::read_dir(&gt_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| nifti_stem(&p).map(|s| (s, p)))
        .collect();
    gt_files.sort();
    if gt_files.is_empty() {
        return Err(usage(format!("no NIfTI masks in {}", gt_dir.display())));
    }
    let pairs = gt_files
        .into_iter()
        .map(|(id, gt)| {
            prediction_for(&pred_dir, &id)
                .map(|p| (gt, p))
                .ok_or_else(|| {
                    CliError::Runtime(format!(
                        "no prediction for case {id} in {}",
                        pred_dir.display()
                    ))
                })
        })
        .collect::<Result<Vec<_>>>()?;

    let metrics = cfg.metrics;
    let rows = pool(a.common.workers)?.install(|| {
        pairs
            .par_iter()
            .map(|(gt_path, pred_path)| -> Result<_> {
                let gt = load_mask(gt_path)?;
                let pred = load_mask(pred_path)?;
                Ok(evaluate_case(&pred, &gt, gt.spacing, &metrics)?)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let summary = MetricsSummary::new(&metrics, rows);
    summary.write(&out)?;
    if let Some(mean) = &summary.mean {
        info!(
            "{} cases: dice {:.4} rvd {:.4} nsd {:.4} hd {:.2}",
            summary.cases.len(),
            mean.dice,
            mean.rvd,
            mean.nsd,
            mean.hd
        );
    }
    let mut run = RunManifest::new("evaluate", cfg.hash());
    run.artifacts = vec![
        out.join("metrics_report.json"),
        out.join("metrics_report.csv"),
    ];
    Ok(run.write(&out)?)
}

fn fmt_value(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "inf".into()
    }
}

fn report(a: ReportArgs) -> Result<()> {
    let cfg = PipelineConfig::load_or_default(a.common.config.as_deref())?;
    let out = out_dir(&a.common, &cfg)?;
    let mut md = String::from("# hemoseg report\n");
    let mut cv_reports = Vec::new();
    let mut metric_reports = Vec::new();
    for input in &a.inputs {
        let path = existing(input.clone(), "report")?;
        let text = std::fs::read_to_string(&path)?;
        if let Ok(cv) = serde_json::from_str::<CvReport>(&text) {
            md.push_str(&format!(
                "\n## Cross-validation: {}\n\n| fold | best Dice | best epoch |\n|---|---|---|\n",
                path.display()
            ));
            for f in &cv.folds {
                md.push_str(&format!(
                    "| {} | {:.4} | {} |\n",
                    f.fold, f.best_val_dice, f.best_epoch
                ));
            }
            md.push_str(&format!("| mean | {:.4} | |\n", cv.mean_dice));
            cv_reports.push(cv);
        } else if let Ok(m) = serde_json::from_str::<MetricsSummary>(&text) {
            md.push_str(&format!(
                "\n## Evaluation: {} (NSD tolerance {} mm, HD percentile {})\n\n| case | Dice | RVD | NSD | HD (mm) |\n|---|---|---|---|---|\n",
                path.display(),
                m.header.tau_mm,
                m.header.hd_percentile
            ));
            for r in m.cases.iter().chain(&m.mean) {
                md.push_str(&format!(
                    "| {} | {} | {} | {} | {} |\n",
                    r.case_id,
                    fmt_value(r.dice),
                    fmt_value(r.rvd),
                    fmt_value(r.nsd),
                    fmt_value(r.hd)
                ));
            }
            metric_reports.push(m);
        } else {
            return Err(usage(format!(
                "{} is neither a cv_report nor a metrics_report",
                path.display()
            )));
        }
    }
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("report.md"), md)?;
    let summary =
        serde_json::json!({ "cross_validation": cv_reports, "evaluation": metric_reports });
    std::fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    let mut run = RunManifest::new("report", cfg.hash());
    run.artifacts = vec![out.join("report.md"), out.join("report.json")];
    Ok(run.write(&out)?)
}

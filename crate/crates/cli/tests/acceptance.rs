//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails. Criteria 7 and 8 share one training run.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use hemoseg::inference::{binarize, ensemble_mean, EnsembleMember, ProbabilityVolume};
use hemoseg::loss::{deep_supervision_loss, deep_supervision_loss_with, LossConfig, LossWeights};
use hemoseg::metrics::{dice, evaluate_case, hausdorff, rvd, MetricReport, MetricsConfig};
use hemoseg::network::{build_model, DeepSupervisionOutputs, NetworkConfig};
use hemoseg::preprocessing::{CropConfig, WindowSpec};
use hemoseg::training::{cosine_lr, train_fold, FoldResult, TrainConfig};
use hemoseg::volume_io::{
    generate_synthetic_case, make_folds, save_mask, save_volume, FoldAssignment, Manifest, Mask,
    SyntheticSpec,
};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn mask(data: Array3<u8>, spacing: [f64; 3]) -> Mask {
    Mask::new(data, spacing, "m").unwrap()
}

// -- 1: metric oracles -------------------------------------------------------

fn bits_mask(bits: u32) -> Mask {
    mask(
        Array3::from_shape_fn((3, 3, 1), |(i, j, _)| ((bits >> (i * 3 + j)) & 1) as u8),
        [1.0; 3],
    )
}

fn oracle_dice(p: u32, g: u32) -> f64 {
    let (np, ng, both) = (p.count_ones(), g.count_ones(), (p & g).count_ones());
    if np + ng == 0 {
        1.0
    } else {
        2.0 * both as f64 / (np + ng) as f64
    }
}

fn oracle_rvd(p: u32, g: u32) -> f64 {
    let (np, ng) = (p.count_ones() as f64, g.count_ones() as f64);
    match (np == 0.0, ng == 0.0) {
        (true, true) => 0.0,
        (_, true) => f64::INFINITY,
        _ => (np - ng).abs() / ng,
    }
}

/// Foreground voxels with at least one face neighbour outside the mask.
fn oracle_surface(m: &Array3<u8>) -> Vec<[usize; 3]> {
    let (h, w, s) = m.dim();
    let inside = |i: isize, j: isize, k: isize| {
        i >= 0
            && j >= 0
            && k >= 0
            && (i as usize) < h
            && (j as usize) < w
            && (k as usize) < s
            && m[[i as usize, j as usize, k as usize]] == 1
    };
    let mut out = Vec::new();
    for ((i, j, k), &v) in m.indexed_iter() {
        let (a, b, c) = (i as isize, j as isize, k as isize);
        let boundary = [
            (1, 0, 0),
            (-1, 0, 0),
            (0, 1, 0),
            (0, -1, 0),
            (0, 0, 1),
            (0, 0, -1),
        ]
        .iter()
        .any(|(di, dj, dk)| !inside(a + di, b + dj, c + dk));
        if v == 1 && boundary {
            out.push([i, j, k]);
        }
    }
    out
}

fn oracle_hausdorff(p: &Array3<u8>, g: &Array3<u8>, spacing: [f64; 3]) -> f64 {
    let (sp, sg) = (oracle_surface(p), oracle_surface(g));
    let dist = |a: &[usize; 3], b: &[usize; 3]| {
        (0..3)
            .map(|d| ((a[d] as f64 - b[d] as f64) * spacing[d]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        from.iter()
            .map(|a| to.iter().map(|b| dist(a, b)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    directed(&sp, &sg).max(directed(&sg, &sp))
}

fn criterion_1() -> Outcome {
    let masks: Vec<Mask> = (0..512).map(bits_mask).collect();
    for p in 0..512u32 {
        for g in 0..512u32 {
            let (mp, mg) = (&masks[p as usize], &masks[g as usize]);
            let d = dice(mp, mg).map_err(|e| e.to_string())?;
            let r = rvd(mp, mg).map_err(|e| e.to_string())?;
            ensure!(
                d == oracle_dice(p, g),
                "dice mismatch for {p:09b} vs {g:09b}: {d}"
            );
            ensure!(
                r == oracle_rvd(p, g),
                "rvd mismatch for {p:09b} vs {g:09b}: {r}"
            );
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut pairs = 0;
    while pairs < 100 {
        let shape = (
            rng.random_range(1..=8),
            rng.random_range(1..=8),
            rng.random_range(1..=3),
        );
        let spacing = [
            rng.random_range(0.3..2.0),
            rng.random_range(0.3..2.0),
            rng.random_range(0.5..6.0),
        ];
        let fill = rng.random_range(0.1..0.7);
        let p = Array3::from_shape_fn(shape, |_| u8::from(rng.random_bool(fill)));
        let g = Array3::from_shape_fn(shape, |_| u8::from(rng.random_bool(fill)));
        if p.iter().all(|&v| v == 0) || g.iter().all(|&v| v == 0) {
            continue;
        }
        let got = hausdorff(
            &mask(p.clone(), spacing),
            &mask(g.clone(), spacing),
            spacing,
        )
        .map_err(|e| e.to_string())?;
        let want = oracle_hausdorff(&p, &g, spacing);
        worst = worst.max((got - want).abs());
        pairs += 1;
    }
    ensure!(worst <= 1e-9, "hausdorff off by {worst:e}");
    Ok(format!(
        "262144 dice/rvd pairs exact; 100 hausdorff pairs, max error {worst:.1e}"
    ))
}

// -- 2: empty-mask conventions -----------------------------------------------

fn criterion_2() -> Outcome {
    let spacing = [0.5, 0.5, 5.0];
    let pred = Mask::zeros((6, 6, 2), spacing, "case");
    let mut g = Array3::zeros((6, 6, 2));
    g[[2, 2, 1]] = 1;
    g[[2, 3, 1]] = 1;
    let gt = Mask::new(g, spacing, "case").unwrap();
    let r =
        evaluate_case(&pred, &gt, spacing, &MetricsConfig::default()).map_err(|e| e.to_string())?;
    ensure!(
        r.dice == 0.0 && r.rvd == 1.0 && r.nsd == 0.0,
        "conventions: {r:?}"
    );
    ensure!(r.hd == f64::INFINITY, "hd {}", r.hd);
    let json = serde_json::to_value(&r).map_err(|e| e.to_string())?;
    ensure!(json["hd"] == "inf", "hd serialized as {}", json["hd"]);
    let back: MetricReport = serde_json::from_value(json).map_err(|e| e.to_string())?;
    ensure!(back.hd == f64::INFINITY, "inf does not round-trip");
    Ok("dice 0, rvd 1, nsd 0, hd inf serialized \"inf\"".into())
}

// -- 3: deep-supervision weighting --------------------------------------------

fn criterion_3() -> Outcome {
    let weights = LossWeights::new(3);
    ensure!(
        weights.as_slice() == [1.0, 0.5, 0.25, 0.125],
        "weights {weights:?}"
    );
    ensure!(weights.total() == 1.875, "total weight {}", weights.total());
    let dev = Device::Cpu;
    let logits = (0..4)
        .map(|i| Tensor::zeros((2, 2, 32 >> i, 32 >> i), DType::F32, &dev).unwrap())
        .collect();
    let outputs = DeepSupervisionOutputs { logits };
    let target = Tensor::zeros((2, 32, 32), DType::U32, &dev).map_err(|e| e.to_string())?;
    let l = 0.731_f64;
    let total =
        deep_supervision_loss_with(&outputs, &target, |o, _| Ok(Tensor::new(l, o.device())?))
            .and_then(|t| Ok(t.to_scalar::<f64>()?))
            .map_err(|e| e.to_string())?;
    ensure!(
        (total - 1.875 * l).abs() <= 1e-6,
        "total {total} vs {}",
        1.875 * l
    );
    Ok(format!(
        "weights {:?}, total {total:.6} = 1.875·{l}",
        weights.as_slice()
    ))
}

// -- 4: gradient check -------------------------------------------------------

fn perturbed(var: &Var, index: usize, delta: f64) -> candle_core::Result<()> {
    let t = var.as_tensor();
    let mut values = t.flatten_all()?.to_vec1::<f64>()?;
    values[index] += delta;
    var.set(&Tensor::from_vec(values, t.dims(), t.device())?)
}

fn criterion_4() -> Outcome {
    let run = || -> candle_core::Result<Outcome> {
        let cfg = NetworkConfig {
            init_filters: 4,
            stage_blocks: vec![1; 5],
            ..Default::default()
        };
        let model = build_model(&cfg, 5, DType::F64).map_err(candle_core::Error::wrap)?;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dev = Device::Cpu;
        let x: Vec<f64> = (0..2 * 3 * 32 * 32)
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        let x = Tensor::from_vec(x, (2, 3, 32, 32), &dev)?;
        let y: Vec<u32> = (0..2 * 32 * 32)
            .map(|i| u32::from((i % 32) / 8 == 1 && (i / 32) % 32 > 10))
            .collect();
        let y = Tensor::from_vec(y, (2, 32, 32), &dev)?;
        let loss_cfg = LossConfig::default();
        let loss = || -> candle_core::Result<Tensor> {
            let out = model.forward(&x, true).map_err(candle_core::Error::wrap)?;
            deep_supervision_loss(&out, &y, &loss_cfg).map_err(candle_core::Error::wrap)
        };
        let grads = loss()?.backward()?;

        let eps = 1e-5;
        let mut checked = Vec::new();
        let mut worst = 0.0f64;
        for (name, var) in model.params() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.flatten_all()?.to_vec1::<f64>()?;
            for index in [0, g.len() / 2, g.len() - 1] {
                perturbed(var, index, eps)?;
                let up = loss()?.to_scalar::<f64>()?;
                perturbed(var, index, -2.0 * eps)?;
                let down = loss()?.to_scalar::<f64>()?;
                perturbed(var, index, eps)?;
                let fd = (up - down) / (2.0 * eps);
                if fd.abs() <= 1e-7 {
                    continue;
                }
                let rel = (fd - g[index]).abs() / fd.abs().max(g[index].abs());
                worst = worst.max(rel);
                checked.push(format!("{name}[{index}]"));
                break;
            }
            if checked.len() >= 8 {
                break;
            }
        }
        if checked.len() < 5 {
            return Ok(Err(format!(
                "only {} parameters with a usable finite difference",
                checked.len()
            )));
        }
        if worst > 1e-2 {
            return Ok(Err(format!("relative error {worst:e} over {checked:?}")));
        }
        Ok(Ok(format!(
            "{} parameters, max relative error {worst:.2e}",
            checked.len()
        )))
    };
    run().map_err(|e| e.to_string())?
}

// -- 5: shape chain ----------------------------------------------------------

fn criterion_5() -> Outcome {
    let mut report = Vec::new();
    for channels in [3usize, 9] {
        let cfg = NetworkConfig {
            in_channels: channels,
            ..Default::default()
        };
        let model = build_model(&cfg, 0, DType::F32).map_err(|e| e.to_string())?;
        ensure!(
            model.encoder_stage_blocks() == [2, 4, 4, 4, 4],
            "blocks {:?}",
            model.encoder_stage_blocks()
        );
        ensure!(
            model.encoder_widths() == [32, 64, 128, 256, 512],
            "widths {:?}",
            model.encoder_widths()
        );
        let x = Tensor::zeros((1, channels, 384, 384), DType::F32, &Device::Cpu)
            .map_err(|e| e.to_string())?;
        let out = model.forward(&x, false).map_err(|e| e.to_string())?;
        let dims: Vec<Vec<usize>> = out.logits.iter().map(|t| t.dims()[1..].to_vec()).collect();
        let want: Vec<Vec<usize>> = [384, 192, 96, 48].iter().map(|&s| vec![2, s, s]).collect();
        ensure!(dims == want, "{channels} channels: {dims:?}");
        report.push(format!("{channels}ch ok"));
    }
    Ok(format!("{}; logits 384/192/96/48", report.join(", ")))
}

// -- 6: scheduler ------------------------------------------------------------

fn criterion_6() -> Outcome {
    let lr = |e| cosine_lr(e, 1600, 2e-4).map_err(|err| err.to_string());
    ensure!(lr(0)? == 2e-4, "lr(0) = {}", lr(0)?);
    ensure!(lr(1600)? == 0.0, "lr(T) = {}", lr(1600)?);
    ensure!((lr(800)? - 1e-4).abs() <= 1e-12, "lr(T/2) = {}", lr(800)?);
    for e in 0..1600 {
        ensure!(lr(e + 1)? <= lr(e)?, "increase at epoch {e}");
    }
    Ok("endpoints exact, midpoint within 1e-12, non-increasing over 1600".into())
}

// -- 7 and 8: smoke training and ensemble --------------------------------------

struct SmokeRun {
    manifest: Manifest,
    folds: FoldAssignment,
    result: FoldResult,
}

fn smoke_training(dir: &Path) -> hemoseg::Result<SmokeRun> {
    let spec = SyntheticSpec {
        shape: [64, 64, 12],
        ..Default::default()
    };
    let mut manifest = Manifest::new(dir);
    for seed in 0..20u64 {
        let (volume, label) = generate_synthetic_case(&spec, seed)?;
        let image = dir.join(format!("{}_img.nii.gz", volume.case_id));
        let lab = dir.join(format!("{}_lab.nii.gz", volume.case_id));
        save_volume(&volume, &image)?;
        save_mask(&label, &volume, &lab)?;
        manifest.insert(volume.case_id.clone(), image, lab);
    }
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 4,
        seed: 7,
        crop: CropConfig {
            size: [64, 64],
            ..Default::default()
        },
        net: NetworkConfig {
            init_filters: 8,
            stage_blocks: vec![1; 5],
            ..Default::default()
        },
        checkpoint_dir: dir.join("checkpoints"),
        snapshot_epochs: vec![10, 20],
        ..Default::default()
    };
    let folds = make_folds(&manifest.case_ids(), 5, 7)?;
    let result = train_fold(&manifest, &folds, 0, &cfg)?;
    Ok(SmokeRun {
        manifest,
        folds,
        result,
    })
}

fn criterion_7(run: &hemoseg::Result<SmokeRun>) -> Outcome {
    let run = run.as_ref().map_err(|e| e.to_string())?;
    let d = run.result.best_val_dice;
    ensure!(d >= 0.60, "held-out Dice {d:.4} < 0.60");
    Ok(format!(
        "held-out Dice {d:.4} at epoch {} over {} validation volumes",
        run.result.best_epoch,
        run.folds.cases_in(0).len()
    ))
}

fn criterion_8(run: &hemoseg::Result<SmokeRun>) -> Outcome {
    let run = run.as_ref().map_err(|e| e.to_string())?;
    let err = |e: hemoseg::Error| e.to_string();
    let mut paths: Vec<PathBuf> = run.result.snapshot_paths.clone();
    paths.push(run.result.checkpoint_path.clone());
    ensure!(paths.len() == 3, "expected 3 checkpoints, got {paths:?}");
    let members = paths
        .iter()
        .map(EnsembleMember::load)
        .collect::<hemoseg::Result<Vec<_>>>()
        .map_err(err)?;

    let case_id = run.folds.cases_in(0)[0].clone();
    let (volume, gt) = run.manifest.load_case(&case_id).map_err(err)?;
    let probs: Vec<ProbabilityVolume> = members
        .iter()
        .map(|m| m.predict(&volume))
        .collect::<hemoseg::Result<_>>()
        .map_err(err)?;
    let member_dice: Vec<f64> = probs
        .iter()
        .map(|p| dice(&binarize(p, 0.5)?, &gt))
        .collect::<hemoseg::Result<_>>()
        .map_err(err)?;
    let mean = ensemble_mean(&probs).map_err(err)?;
    let ens = dice(&binarize(&mean, 0.5).map_err(err)?, &gt).map_err(err)?;
    let floor = member_dice.iter().copied().fold(f64::INFINITY, f64::min) - 0.02;
    ensure!(
        ens >= floor,
        "ensemble Dice {ens:.4} below {floor:.4} (members {member_dice:?})"
    );

    for order in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
        let permuted: Vec<_> = order.iter().map(|&i| probs[i].clone()).collect();
        let other = ensemble_mean(&permuted).map_err(err)?;
        let same = other
            .probs
            .iter()
            .zip(mean.probs.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        ensure!(same, "ensemble_mean differs under permutation {order:?}");
    }
    Ok(format!(
        "{case_id}: ensemble Dice {ens:.4}, members {}; permutations bit-identical",
        member_dice
            .iter()
            .map(|d| format!("{d:.4}"))
            .collect::<Vec<_>>()
            .join("/")
    ))
}

// -- 9: determinism through the CLI --------------------------------------------

fn cli(args: &[&str]) -> i32 {
    hemoseg_cli::dispatch(std::iter::once("hemoseg").chain(args.iter().copied()))
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path().to_str().unwrap().to_string();
    let data = format!("{root}/data");
    let code = cli(&[
        "synth", "--out", &data, "--cases", "4", "--seed", "3", "--shape", "32,32,6",
    ]);
    ensure!(code == 0, "synth exited {code}");
    let manifest = format!("{data}/manifest.json");
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let out = format!("{root}/{run}");
        let code = cli(&[
            "cross-validate",
            "--manifest",
            &manifest,
            "--out",
            &out,
            "--k",
            "2",
            "--epochs",
            "5",
            "--init-filters",
            "4",
            "--crop-size",
            "32",
            "--batch-size",
            "4",
            "--workers",
            "1",
        ]);
        ensure!(code == 0, "cross-validate run {run} exited {code}");
        reports.push(std::fs::read(format!("{out}/cv_report.json")).map_err(|e| e.to_string())?);
    }
    ensure!(
        reports[0] == reports[1],
        "cv_report.json differs between runs"
    );
    Ok(format!(
        "two k=2 runs wrote identical cv_report.json ({} bytes)",
        reports[0].len()
    ))
}

// -- 10: windowing -----------------------------------------------------------

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut hu: Vec<f32> = (0..10_000)
        .map(|_| rng.random_range(-1024.0..3072.0))
        .collect();
    hu.sort_by(f32::total_cmp);
    for window in WindowSpec::head_ct_trio() {
        let (lo, hi) = (
            window.center - window.width / 2.0,
            window.center + window.width / 2.0,
        );
        let mapped: Vec<f32> = hu.iter().map(|&v| window.map(v)).collect();
        ensure!(
            mapped.windows(2).all(|p| p[0] <= p[1]),
            "{} not monotone",
            window.name
        );
        for (&v, &m) in hu.iter().zip(&mapped) {
            ensure!(
                (0.0..=1.0).contains(&m),
                "{} out of range at {v}",
                window.name
            );
            if v <= lo {
                ensure!(m == 0.0, "{} at {v}: {m}", window.name);
            }
            if v >= hi {
                ensure!(m == 1.0, "{} at {v}: {m}", window.name);
            }
        }
        ensure!(
            window.map(lo) == 0.0 && window.map(hi) == 1.0,
            "{} boundaries",
            window.name
        );

        // rescaling HU and the window together leaves the output unchanged
        for _ in 0..10 {
            let a: f32 = rng.random_range(0.25..4.0);
            let b: f32 = rng.random_range(-500.0..500.0);
            let scaled = WindowSpec::new(a * window.center + b, a * window.width, "scaled")
                .map_err(|e| e.to_string())?;
            for (&v, &m) in hu.iter().zip(&mapped) {
                let d = (scaled.map(a * v + b) - m).abs();
                ensure!(d <= 1e-4, "{} affine a={a} b={b} at {v}: {d}", window.name);
            }
        }
    }
    Ok("10000 HU values x 3 windows: monotone, clamped, affine-invariant".into())
}

// -- harness -----------------------------------------------------------------

fn check(id: usize, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
    let elapsed = start.elapsed();
    let outcome = match outcome {
        Ok(_) if elapsed > budget => Err(format!("took {elapsed:.1?}, budget {budget:?}")),
        other => other,
    };
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} criterion {id:>2} [{name}] {detail} ({elapsed:.1?})");
    outcome.is_ok()
}

fn main() {
    let secs = Duration::from_secs;
    let mut ok = true;
    ok &= check(1, "metric oracles", secs(60), criterion_1);
    ok &= check(2, "empty-mask conventions", secs(1), criterion_2);
    ok &= check(3, "deep-supervision weighting", secs(1), criterion_3);
    ok &= check(4, "gradient check", secs(120), criterion_4);
    ok &= check(5, "shape chain", secs(30), criterion_5);
    ok &= check(6, "scheduler", secs(1), criterion_6);

    let dir = tempfile::tempdir().expect("temp dir");
    let mut smoke = None;
    ok &= check(7, "synthetic smoke training", secs(15 * 60), || {
        let run = smoke_training(dir.path());
        let outcome = criterion_7(&run);
        smoke = Some(run);
        outcome
    });
    let smoke =
        smoke.unwrap_or_else(|| Err(hemoseg::Error::Config("smoke training panicked".into())));
    ok &= check(8, "ensemble consistency", secs(5 * 60), || {
        criterion_8(&smoke)
    });
    ok &= check(9, "determinism", secs(10 * 60), criterion_9);
    ok &= check(10, "windowing", secs(5), criterion_10);

    if !ok {
        std::process::exit(1);
    }
}

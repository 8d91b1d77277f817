//! Combined soft-Dice + cross-entropy loss and its deep-supervision sum.

use candle_core::{DType, Tensor};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{log_softmax_classes, softmax_classes, DeepSupervisionOutputs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Added to the Dice numerator and denominator.
    pub dice_smooth: f64,
    /// Optional per-class cross-entropy weights.
    pub ce_class_weights: Option<Vec<f64>>,
    pub include_background_in_dice: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            dice_smooth: 1e-5,
            ce_class_weights: None,
            include_background_in_dice: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dice_smooth > 0.0) {
            return Err(Error::arg("dice_smooth must be positive"));
        }
        if let Some(w) = &self.ce_class_weights {
            if w.iter().any(|&x| !(x >= 0.0)) || w.iter().all(|&x| x == 0.0) {
                return Err(Error::arg(
                    "class weights must be non-negative and not all zero",
                ));
            }
        }
        Ok(())
    }
}

/// Level weights `1 / 2^i` for `i = 0..=ds_levels`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights(Vec<f64>);

impl LossWeights {
    pub fn new(ds_levels: usize) -> Self {
        Self((0..=ds_levels).map(|i| 0.5f64.powi(i as i32)).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Adds a batch axis to `(K, H, W)` logits / `(H, W)` targets.
fn batched(logits: &Tensor, target: &Tensor) -> Result<(Tensor, Tensor)> {
    let (logits, target) = match (logits.rank(), target.rank()) {
        (3, 2) => (logits.unsqueeze(0)?, target.unsqueeze(0)?),
        (4, 3) => (logits.clone(), target.clone()),
        (l, t) => {
            return Err(Error::arg(format!(
                "expected (K,H,W)/(H,W) or (B,K,H,W)/(B,H,W), got ranks {l} and {t}"
            )))
        }
    };
    let (b, _, h, w) = logits.dims4()?;
    if target.dims() != [b, h, w] {
        return Err(Error::arg(format!(
            "logits {:?} and target {:?} are not aligned",
            logits.dims(),
            target.dims()
        )));
    }
    Ok((logits, target.to_dtype(DType::U32)?))
}

/// One-hot `(B, K, H, W)` encoding of `(B, H, W)` class indices.
fn one_hot(target: &Tensor, classes: usize, dtype: DType) -> Result<Tensor> {
    let ids = Tensor::arange(0u32, classes as u32, target.device())?.reshape((1, classes, 1, 1))?;
    Ok(target.unsqueeze(1)?.broadcast_eq(&ids)?.to_dtype(dtype)?)
}

/// Soft-Dice and cross-entropy terms, each a scalar tensor.
///
/// Dice is `1 - (2 sum(p g) + s) / (sum(p) + sum(g) + s)` per sample and
/// class, averaged; cross-entropy is the (optionally class-weighted) mean
/// pixel negative log-likelihood.
pub fn dice_ce_components(
    logits: &Tensor,
    target: &Tensor,
    cfg: &LossConfig,
) -> Result<(Tensor, Tensor)> {
    cfg.validate()?;
    let (logits, target) = batched(logits, target)?;
    let k = logits.dim(1)?;
    let max_label = target.max_all()?.to_scalar::<u32>()? as usize;
    if max_label >= k {
        return Err(Error::arg(format!(
            "target contains class {max_label} but logits have {k} classes"
        )));
    }
    let dtype = logits.dtype();
    let g = one_hot(&target, k, dtype)?;
    let p = softmax_classes(&logits)?;
    let logp = log_softmax_classes(&logits)?;

    let first = if cfg.include_background_in_dice { 0 } else { 1 };
    let p_fg = p.narrow(1, first, k - first)?;
    let g_fg = g.narrow(1, first, k - first)?;
    let inter = (&p_fg * &g_fg)?.sum((2, 3))?;
    let denom = (p_fg.sum((2, 3))? + g_fg.sum((2, 3))?)?;
    let s = cfg.dice_smooth;
    let dice = ((inter * 2.0)? + s)?.div(&(denom + s)?)?;
    let dice_loss = dice.mean_all()?.affine(-1.0, 1.0)?;

    let nll = (&g * &logp)?.sum(1)?.neg()?;
    let ce = match &cfg.ce_class_weights {
        None => nll.mean_all()?,
        Some(w) => {
            if w.len() != k {
                return Err(Error::arg(format!(
                    "{} class weights for {k} classes",
                    w.len()
                )));
            }
            let w = Tensor::new(w.as_slice(), logits.device())?
                .to_dtype(dtype)?
                .reshape((1, k, 1, 1))?;
            let pixel_w = g.broadcast_mul(&w)?.sum(1)?;
            (&pixel_w * &nll)?.sum_all()?.div(&pixel_w.sum_all()?)?
        }
    };
    Ok((dice_loss, ce))
}

/// Soft-Dice loss plus cross-entropy for `(K, H, W)` logits and `(H, W)`
/// class indices (or the batched `(B, K, H, W)` / `(B, H, W)` forms).
pub fn dice_ce_loss(logits: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let (dice, ce) = dice_ce_components(logits, target, cfg)?;
    Ok((dice + ce)?)
}

fn check_factor(h: usize, w: usize, factor: usize) -> Result<()> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::arg(format!(
            "factor must be a power of two, got {factor}"
        )));
    }
    if !h.is_multiple_of(factor) || !w.is_multiple_of(factor) {
        return Err(Error::arg(format!("{h}x{w} is not divisible by {factor}")));
    }
    Ok(())
}

/// Nearest-neighbour downsampling by `factor`: output pixel `i` reads source
/// pixel `i * factor + factor / 2`.
pub fn downsample_target(target: ArrayView2<'_, u8>, factor: usize) -> Result<Array2<u8>> {
    let (h, w) = target.dim();
    check_factor(h, w, factor)?;
    let off = factor / 2;
    Ok(Array2::from_shape_fn((h / factor, w / factor), |(i, j)| {
        target[[i * factor + off, j * factor + off]]
    }))
}

/// Tensor form of [`downsample_target`] for `(H, W)` or `(B, H, W)` targets.
pub fn downsample_target_tensor(target: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(target.clone());
    }
    let dims = target.dims().to_vec();
    let (h, w) = match dims.as_slice() {
        [.., h, w] if dims.len() >= 2 => (*h, *w),
        _ => return Err(Error::arg("target must have at least two axes")),
    };
    check_factor(h, w, factor)?;
    let lead: Vec<usize> = dims[..dims.len() - 2].to_vec();
    let n = lead.len();
    let mut split = lead.clone();
    split.extend([h / factor, factor, w / factor, factor]);
    let off = factor / 2;
    let picked = target
        .reshape(split)?
        .narrow(n + 1, off, 1)?
        .narrow(n + 3, off, 1)?;
    let mut out = lead;
    out.extend([h / factor, w / factor]);
    Ok(picked.reshape(out)?.contiguous()?)
}

/// `sum_i 2^-i * level_loss(outputs[i], target downsampled by 2^i)`.
///
/// Checks the halving shape chain before evaluating any level.
pub fn deep_supervision_loss_with<F>(
    outputs: &DeepSupervisionOutputs,
    target: &Tensor,
    mut level_loss: F,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, &Tensor) -> Result<Tensor>,
{
    if outputs.is_empty() {
        return Err(Error::arg("no outputs"));
    }
    let dims = target.dims();
    if dims.len() < 2 {
        return Err(Error::arg("target must have at least two axes"));
    }
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    for (i, logits) in outputs.logits.iter().enumerate() {
        let ld = logits.dims();
        let f = 1usize << i;
        if ld.len() < 2 || ld[ld.len() - 2] * f != h || ld[ld.len() - 1] * f != w {
            return Err(Error::arg(format!(
                "output {i} has shape {ld:?}, expected spatial {}x{}",
                h / f,
                w / f
            )));
        }
    }
    let weights = LossWeights::new(outputs.len() - 1);
    let mut total: Option<Tensor> = None;
    for (i, (logits, &wt)) in outputs.logits.iter().zip(weights.as_slice()).enumerate() {
        let t = downsample_target_tensor(target, 1 << i)?;
        let term = (level_loss(logits, &t)? * wt)?;
        total = Some(match total {
            None => term,
            Some(acc) => (acc + term)?,
        });
    }
    Ok(total.expect("at least one output"))
}

/// Deep-supervision loss with [`dice_ce_loss`] at every level. The sum is
/// not renormalised by the total weight.
pub fn deep_supervision_loss(
    outputs: &DeepSupervisionOutputs,
    target: &Tensor,
    cfg: &LossConfig,
) -> Result<Tensor> {
    deep_supervision_loss_with(outputs, target, |l, t| dice_ce_loss(l, t, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn logits_from(values: &[f64], k: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(values.to_vec(), (k, h, w), &Device::Cpu).unwrap()
    }

    fn target_from(values: &[u32], h: usize, w: usize) -> Tensor {
        Tensor::from_vec(values.to_vec(), (h, w), &Device::Cpu).unwrap()
    }

    /// Brute-force foreground soft Dice loss over enumerated pixels.
    fn oracle_dice(
        logits: &[f64],
        target: &[u32],
        k: usize,
        n: usize,
        smooth: f64,
        include_bg: bool,
    ) -> f64 {
        let mut losses = Vec::new();
        for c in (if include_bg { 0 } else { 1 })..k {
            let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
            for px in 0..n {
                let z: Vec<f64> = (0..k).map(|kk| logits[kk * n + px]).collect();
                let m = z.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let p = e[c] / e.iter().sum::<f64>();
                let g = if target[px] as usize == c { 1.0 } else { 0.0 };
                inter += p * g;
                sp += p;
                sg += g;
            }
            losses.push((2.0 * inter + smooth) / (sp + sg + smooth));
        }
        1.0 - losses.iter().sum::<f64>() / losses.len() as f64
    }

    #[test]
    fn confident_correct_logits_give_tiny_loss() {
        let target = [0u32, 1, 1, 0, 1, 0, 0, 1, 0];
        let mut logits = vec![0.0; 18];
        for (px, &t) in target.iter().enumerate() {
            logits[t as usize * 9 + px] = 10.0;
        }
        let loss = dice_ce_loss(
            &logits_from(&logits, 2, 3, 3),
            &target_from(&target, 3, 3),
            &LossConfig::default(),
        )
        .unwrap();
        assert!(scalar(&loss) < 0.01, "{}", scalar(&loss));
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln2() {
        let (_, ce) = dice_ce_components(
            &logits_from(&[0.0; 32], 2, 4, 4),
            &target_from(&[1, 0, 0, 1, 0, 0, 1, 1, 0, 1, 0, 0, 0, 0, 1, 1], 4, 4),
            &LossConfig::default(),
        )
        .unwrap();
        assert!((scalar(&ce) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn empty_target_confident_background_is_finite_and_small() {
        let mut logits = vec![0.0; 32];
        logits[..16].fill(20.0);
        let loss = dice_ce_loss(
            &logits_from(&logits, 2, 4, 4),
            &target_from(&[0; 16], 4, 4),
            &LossConfig::default(),
        )
        .unwrap();
        let v = scalar(&loss);
        assert!(v.is_finite() && v < 0.01, "{v}");
    }

    #[test]
    fn rejects_misaligned_or_out_of_range_targets() {
        let logits = logits_from(&[0.0; 32], 2, 4, 4);
        assert!(
            dice_ce_loss(&logits, &target_from(&[0; 9], 3, 3), &LossConfig::default()).is_err()
        );
        assert!(dice_ce_loss(
            &logits,
            &target_from(&[2; 16], 4, 4),
            &LossConfig::default()
        )
        .is_err());
    }

    #[test]
    fn class_weights_change_cross_entropy() {
        let logits = logits_from(&[0.5, -1.0, 2.0, 0.0, 0.0, 1.0, -0.5, 0.3], 2, 2, 2);
        let target = target_from(&[0, 1, 1, 0], 2, 2);
        let plain = dice_ce_components(&logits, &target, &LossConfig::default())
            .unwrap()
            .1;
        let equal = LossConfig {
            ce_class_weights: Some(vec![2.0, 2.0]),
            ..Default::default()
        };
        assert!(
            (scalar(&plain) - scalar(&dice_ce_components(&logits, &target, &equal).unwrap().1))
                .abs()
                < 1e-12
        );
        let skewed = LossConfig {
            ce_class_weights: Some(vec![1.0, 5.0]),
            ..Default::default()
        };
        assert!(
            (scalar(&plain) - scalar(&dice_ce_components(&logits, &target, &skewed).unwrap().1))
                .abs()
                > 1e-3
        );
    }

    #[test]
    fn weights_halve() {
        let w = LossWeights::new(3);
        assert_eq!(w.as_slice(), &[1.0, 0.5, 0.25, 0.125]);
        assert!(w.as_slice().windows(2).all(|p| p[1] == p[0] / 2.0));
        assert_eq!(w.total(), 1.875);
    }

    /// Source pixel for output `i`: `round((i + 0.5) f - 0.5)`.
    fn oracle_downsample(t: &Array2<u8>, f: usize) -> Array2<u8> {
        let (h, w) = t.dim();
        let src = |i: usize| ((i as f64 + 0.5) * f as f64 - 0.5).round() as usize;
        Array2::from_shape_fn((h / f, w / f), |(i, j)| t[[src(i), src(j)]])
    }

    #[test]
    fn downsample_examples() {
        let checker = Array2::from_shape_fn((4, 4), |(i, j)| ((i + j) % 2) as u8);
        assert_eq!(downsample_target(checker.view(), 1).unwrap(), checker);
        assert_eq!(
            downsample_target(checker.view(), 2).unwrap(),
            oracle_downsample(&checker, 2)
        );
        let constant = Array2::from_elem((8, 8), 1u8);
        assert_eq!(
            downsample_target(constant.view(), 4).unwrap(),
            Array2::from_elem((2, 2), 1u8)
        );
        assert!(downsample_target(checker.view(), 3).is_err());
        assert!(downsample_target(Array2::<u8>::zeros((6, 6)).view(), 4).is_err());
    }

    #[test]
    fn single_level_equals_plain_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits: Vec<f64> = (0..2 * 64).map(|_| rng.random_range(-2.0..2.0)).collect();
        let target: Vec<u32> = (0..64).map(|_| rng.random_range(0..2)).collect();
        let l = logits_from(&logits, 2, 8, 8);
        let t = target_from(&target, 8, 8);
        let outputs = DeepSupervisionOutputs {
            logits: vec![l.clone()],
        };
        let cfg = LossConfig::default();
        assert_eq!(
            scalar(&deep_supervision_loss(&outputs, &t, &cfg).unwrap()),
            scalar(&dice_ce_loss(&l, &t, &cfg).unwrap())
        );
    }

    #[test]
    fn pinned_levels_sum_to_geometric_total() {
        let outputs = DeepSupervisionOutputs {
            logits: (0..4)
                .map(|i| Tensor::zeros((2, 16 >> i, 16 >> i), DType::F64, &Device::Cpu).unwrap())
                .collect(),
        };
        let target = Tensor::zeros((16, 16), DType::U32, &Device::Cpu).unwrap();
        let l = 0.8125;
        let total =
            deep_supervision_loss_with(&outputs, &target, |_, _| Ok(Tensor::new(l, &Device::Cpu)?))
                .unwrap();
        assert!((scalar(&total) - 1.875 * l).abs() < 1e-12);
    }

    #[test]
    fn broken_shape_chain_rejected() {
        let outputs = DeepSupervisionOutputs {
            logits: vec![
                Tensor::zeros((2, 16, 16), DType::F64, &Device::Cpu).unwrap(),
                Tensor::zeros((2, 4, 4), DType::F64, &Device::Cpu).unwrap(),
            ],
        };
        let target = Tensor::zeros((16, 16), DType::U32, &Device::Cpu).unwrap();
        assert!(matches!(
            deep_supervision_loss(&outputs, &target, &LossConfig::default()),
            Err(Error::Argument(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn dice_matches_scalar_oracle(seed in any::<u64>(), include_bg in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits: Vec<f64> = (0..2 * 16).map(|_| rng.random_range(-4.0..4.0)).collect();
            let target: Vec<u32> = (0..16).map(|_| rng.random_range(0..2)).collect();
            let cfg = LossConfig { include_background_in_dice: include_bg, ..Default::default() };
            let (dice, _) = dice_ce_components(&logits_from(&logits, 2, 4, 4), &target_from(&target, 4, 4), &cfg).unwrap();
            let expected = oracle_dice(&logits, &target, 2, 16, cfg.dice_smooth, include_bg);
            prop_assert!((scalar(&dice) - expected).abs() < 1e-6);
        }

        #[test]
        fn tensor_and_array_downsampling_agree(seed in any::<u64>(), shift in 0u32..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = 1usize << shift;
            let arr = Array2::from_shape_fn((16, 8), |_| rng.random_range(0..3u8));
            let expected = oracle_downsample(&arr, f);
            prop_assert_eq!(&downsample_target(arr.view(), f).unwrap(), &expected);
            let t = Tensor::from_vec(arr.iter().map(|&v| v as u32).collect::<Vec<_>>(), (16, 8), &Device::Cpu).unwrap();
            let got: Vec<Vec<u32>> = downsample_target_tensor(&t, f).unwrap().to_vec2().unwrap();
            let exp: Vec<Vec<u32>> = expected.outer_iter().map(|r| r.iter().map(|&v| v as u32).collect()).collect();
            prop_assert_eq!(got, exp);
        }

        #[test]
        fn total_loss_non_negative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let outputs = DeepSupervisionOutputs {
                logits: (0..4)
                    .map(|i| {
                        let n = 16 >> i;
                        let v: Vec<f64> = (0..2 * n * n).map(|_| rng.random_range(-20.0..20.0)).collect();
                        logits_from(&v, 2, n, n)
                    })
                    .collect(),
            };
            let t: Vec<u32> = (0..256).map(|_| rng.random_range(0..2)).collect();
            let total = scalar(&deep_supervision_loss(&outputs, &target_from(&t, 16, 16), &LossConfig::default()).unwrap());
            prop_assert!(total >= 0.0 && total.is_finite());
        }

        #[test]
        fn moving_towards_target_decreases_loss(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits: Vec<f64> = (0..2 * 16).map(|_| rng.random_range(-3.0..3.0)).collect();
            let target: Vec<u32> = (0..16).map(|_| rng.random_range(0..2)).collect();
            let mut better = logits.clone();
            for px in 0..16 {
                let c = target[px] as usize;
                better[c * 16 + px] += 0.5;
                better[(1 - c) * 16 + px] -= 0.5;
            }
            let t = target_from(&target, 4, 4);
            let cfg = LossConfig::default();
            let before = scalar(&dice_ce_loss(&logits_from(&logits, 2, 4, 4), &t, &cfg).unwrap());
            let after = scalar(&dice_ce_loss(&logits_from(&better, 2, 4, 4), &t, &cfg).unwrap());
            prop_assert!(after < before);
        }
    }
}

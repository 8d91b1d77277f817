//! 2D residual encoder-decoder with deep-supervision heads.
//!
//! Layout for `init_filters = f` and input `H x W`:
//!
//! | level            | resolution | width  |
//! |------------------|------------|--------|
//! | stem (3x3 conv)  | H          | f      |
//! | encoder stage s  | H / 2^(s+1)| f * 2^s|
//! | decoder level d  | H / 2^d    | width of the skip it joins |
//!
//! Every encoder stage opens with a stride-2 3x3 convolution followed by its
//! residual blocks. Each decoder level projects with a 1x1 convolution,
//! upsamples by nearest neighbour, adds the encoder skip and runs one
//! residual block. A 1x1 head maps the full-resolution decoder output to class
//! logits; further 1x1 heads do the same at the `ds_levels` next coarser
//! decoder levels.

mod checkpoint;
mod layers;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use layers::{Conv2d, ParamFactory, ResBlock};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_FORMAT_VERSION};
pub use layers::{log_softmax_classes, softmax_classes, NormKind};

/// Number of encoder stages; each halves the resolution.
pub const N_STAGES: usize = 5;

/// Spatial dimensions fed to [`SegNet::forward`] must be multiples of this.
pub const SPATIAL_DIVISOR: usize = 1 << N_STAGES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub out_classes: usize,
    pub init_filters: usize,
    pub stage_blocks: Vec<usize>,
    pub norm: NormKind,
    pub ds_levels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            out_classes: 2,
            init_filters: 32,
            stage_blocks: vec![2, 4, 4, 4, 4],
            norm: NormKind::Instance,
            ds_levels: 3,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_blocks.len() != N_STAGES {
            return Err(Error::arg(format!(
                "stage_blocks must have {N_STAGES} entries, got {}",
                self.stage_blocks.len()
            )));
        }
        if self.init_filters == 0 || self.in_channels == 0 {
            return Err(Error::arg("init_filters and in_channels must be positive"));
        }
        if self.out_classes < 2 {
            return Err(Error::arg("out_classes must be at least 2"));
        }
        if self.ds_levels >= N_STAGES {
            return Err(Error::arg(format!(
                "ds_levels must be below {N_STAGES}, got {}",
                self.ds_levels
            )));
        }
        Ok(())
    }

    /// Feature width of each encoder stage.
    pub fn stage_widths(&self) -> Vec<usize> {
        (0..N_STAGES).map(|s| self.init_filters << s).collect()
    }
}

/// Per-scale logits, full resolution first; entry `i` is downscaled by `2^i`.
#[derive(Debug, Clone)]
pub struct DeepSupervisionOutputs {
    pub logits: Vec<Tensor>,
}

impl DeepSupervisionOutputs {
    pub fn full_resolution(&self) -> &Tensor {
        &self.logits[0]
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }
}

#[derive(Debug, Clone)]
struct EncoderStage {
    down: Conv2d,
    blocks: Vec<ResBlock>,
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    proj: Conv2d,
    block: ResBlock,
}

/// The segmentation network. Parameters are candle [`Var`]s so the same
/// model serves training (autograd) and inference.
#[derive(Debug, Clone)]
pub struct SegNet {
    config: NetworkConfig,
    dtype: DType,
    seed: u64,
    stem: Conv2d,
    encoder: Vec<EncoderStage>,
    /// Deepest level first.
    decoder: Vec<DecoderLevel>,
    /// `heads[i]` reads the decoder level at scale `2^i`.
    heads: Vec<Conv2d>,
    params: Vec<(String, Var)>,
    buffers: Vec<(String, Var)>,
}

/// Builds a freshly initialised network; the parameter stream is fully
/// determined by `seed`.
pub fn build_model(cfg: &NetworkConfig, seed: u64, dtype: DType) -> Result<SegNet> {
    cfg.validate()?;
    if !matches!(dtype, DType::F32 | DType::F64) {
        return Err(Error::arg(format!("unsupported dtype {dtype:?}")));
    }
    let mut f = ParamFactory::new(ChaCha8Rng::seed_from_u64(seed), dtype);
    let widths = cfg.stage_widths();
    let f0 = cfg.init_filters;

    let stem = f.conv("stem", cfg.in_channels, f0, 3, 1)?;
    let mut encoder = Vec::with_capacity(N_STAGES);
    let mut prev = f0;
    for (s, (&width, &n_blocks)) in widths.iter().zip(&cfg.stage_blocks).enumerate() {
        let down = f.conv(&format!("encoder.{s}.down"), prev, width, 3, 2)?;
        let blocks = (0..n_blocks)
            .map(|b| ResBlock::new(&mut f, &format!("encoder.{s}.block{b}"), cfg.norm, width))
            .collect::<Result<Vec<_>>>()?;
        encoder.push(EncoderStage { down, blocks });
        prev = width;
    }

    // Skip widths at scales 2^4 .. 2^0: encoder stages 3..0, then the stem.
    let mut decoder = Vec::with_capacity(N_STAGES);
    let mut width_in = widths[N_STAGES - 1];
    for level in (0..N_STAGES).rev() {
        let width_out = if level == 0 { f0 } else { widths[level - 1] };
        let proj = f.conv(&format!("decoder.{level}.proj"), width_in, width_out, 1, 1)?;
        let block = ResBlock::new(
            &mut f,
            &format!("decoder.{level}.block"),
            cfg.norm,
            width_out,
        )?;
        decoder.push(DecoderLevel { proj, block });
        width_in = width_out;
    }

    let heads = (0..=cfg.ds_levels)
        .map(|i| {
            let width = if i == 0 { f0 } else { widths[i - 1] };
            f.conv(&format!("head.{i}"), width, cfg.out_classes, 1, 1)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SegNet {
        config: cfg.clone(),
        dtype,
        seed,
        stem,
        encoder,
        decoder,
        heads,
        params: f.params,
        buffers: f.buffers,
    })
}

impl SegNet {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Seed the parameters were initialised from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Residual block count of each encoder stage.
    pub fn encoder_stage_blocks(&self) -> Vec<usize> {
        self.encoder.iter().map(|s| s.blocks.len()).collect()
    }

    /// Output width of each encoder stage.
    pub fn encoder_widths(&self) -> Vec<usize> {
        self.config.stage_widths()
    }

    pub fn in_channels(&self) -> usize {
        self.stem.in_channels()
    }

    /// Trainable parameters in construction order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers(&self) -> &[(String, Var)] {
        &self.buffers
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.params.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Runs the network on `(C, H, W)` or `(B, C, H, W)` input; outputs keep
    /// the batch axis only if the input had one. Logits are pre-softmax.
    pub fn forward(&self, input: &Tensor, training: bool) -> Result<DeepSupervisionOutputs> {
        let unbatched = input.rank() == 3;
        let x = match input.rank() {
            3 => input.unsqueeze(0)?,
            4 => input.clone(),
            r => {
                return Err(Error::shape(format!(
                    "expected rank 3 or 4 input, got rank {r}"
                )))
            }
        };
        let (_, c, h, w) = x.dims4()?;
        if c != self.in_channels() {
            return Err(Error::shape(format!(
                "model expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        if h % SPATIAL_DIVISOR != 0 || w % SPATIAL_DIVISOR != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "spatial size {h}x{w} is not a positive multiple of {SPATIAL_DIVISOR}"
            )));
        }
        let x = x.to_dtype(self.dtype)?;

        let mut skips = Vec::with_capacity(N_STAGES);
        let mut y = self.stem.forward(&x)?;
        for stage in &self.encoder {
            skips.push(y.clone());
            y = stage.down.forward(&y)?;
            for block in &stage.blocks {
                y = block.forward(&y, training)?;
            }
        }

        // decoder[j] produces scale 2^(N_STAGES - 1 - j)
        let mut by_scale = vec![None; N_STAGES];
        for (j, level) in self.decoder.iter().enumerate() {
            let scale = N_STAGES - 1 - j;
            let skip = &skips[scale];
            let (_, _, sh, sw) = skip.dims4()?;
            // Project before upsampling: cheaper, and equal for a 1x1 conv.
            let up = level.proj.forward(&y)?.upsample_nearest2d(sh, sw)?;
            y = level.block.forward(&(up + skip)?, training)?;
            by_scale[scale] = Some(y.clone());
        }

        let logits = self
            .heads
            .iter()
            .enumerate()
            .map(|(i, head)| {
                let feat = by_scale[i].as_ref().expect("every scale is decoded");
                let out = head.forward(feat)?;
                if unbatched {
                    Ok(out.squeeze(0)?)
                } else {
                    Ok(out)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DeepSupervisionOutputs { logits })
    }

    /// Class probabilities from the full-resolution head (inference mode).
    pub fn predict_probs(&self, input: &Tensor) -> Result<Tensor> {
        let out = self.forward(input, false)?;
        let logits = out.full_resolution();
        // class axis is 0 for unbatched input
        Ok(candle_nn::ops::softmax(logits, logits.rank() - 3)?)
    }

    /// Copies every parameter and buffer of `other` into this model.
    pub fn load_state_from(&self, other: &SegNet) -> Result<()> {
        if self.config != other.config {
            return Err(Error::arg(
                "cannot copy state between different configurations",
            ));
        }
        for ((_, a), (_, b)) in self
            .params
            .iter()
            .zip(&other.params)
            .chain(self.buffers.iter().zip(&other.buffers))
        {
            a.set(b.as_tensor())?;
        }
        Ok(())
    }

    /// Independent copy with its own parameter storage.
    pub fn deep_clone(&self) -> Result<SegNet> {
        let copy = build_model(&self.config, self.seed, self.dtype)?;
        copy.load_state_from(self)?;
        Ok(copy)
    }
}

pub(crate) fn cpu() -> Device {
    Device::Cpu
}

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;

const NORM_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NormKind {
    Instance,
    Batch,
}

/// Creates named, seeded parameters in construction order.
pub(crate) struct ParamFactory {
    rng: ChaCha8Rng,
    dtype: DType,
    pub(crate) params: Vec<(String, Var)>,
    pub(crate) buffers: Vec<(String, Var)>,
}

impl ParamFactory {
    pub(crate) fn new(rng: ChaCha8Rng, dtype: DType) -> Self {
        Self {
            rng,
            dtype,
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    fn tensor(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        let var = Var::from_tensor(&self.tensor(values, shape)?)?;
        self.params.push((name, var.clone()));
        Ok(var)
    }

    fn constant(
        &mut self,
        name: String,
        shape: &[usize],
        value: f64,
        trainable: bool,
    ) -> Result<Var> {
        let n: usize = shape.iter().product();
        let var = Var::from_tensor(&self.tensor(vec![value; n], shape)?)?;
        if trainable {
            self.params.push((name, var.clone()));
        } else {
            self.buffers.push((name, var.clone()));
        }
        Ok(var)
    }

    /// Weights and bias uniform in `±1/sqrt(fan_in)`.
    pub(crate) fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Conv2d> {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        let weight = self.uniform(
            format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            bound,
        )?;
        let bias = self.uniform(format!("{name}.bias"), &[c_out], bound)?;
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub(crate) fn norm(&mut self, name: &str, kind: NormKind, channels: usize) -> Result<Norm> {
        let gamma = self.constant(format!("{name}.weight"), &[channels], 1.0, true)?;
        let beta = self.constant(format!("{name}.bias"), &[channels], 0.0, true)?;
        Ok(match kind {
            NormKind::Instance => Norm::Instance { gamma, beta },
            NormKind::Batch => Norm::Batch {
                gamma,
                beta,
                running_mean: self.constant(
                    format!("{name}.running_mean"),
                    &[channels],
                    0.0,
                    false,
                )?,
                running_var: self.constant(
                    format!("{name}.running_var"),
                    &[channels],
                    1.0,
                    false,
                )?,
            },
        })
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Conv2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }

    pub(crate) fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Norm {
    Instance {
        gamma: Var,
        beta: Var,
    },
    Batch {
        gamma: Var,
        beta: Var,
        running_mean: Var,
        running_var: Var,
    },
}

fn channel_view(t: &Tensor) -> Result<Tensor> {
    let c = t.dim(0)?;
    Ok(t.reshape((1, c, 1, 1))?)
}

impl Norm {
    /// `x` is `(B, C, H, W)`. Batch norm uses batch statistics and updates
    /// its running estimates when `training`, and the running estimates otherwise.
    pub(crate) fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let (gamma, beta, normalized) = match self {
            Norm::Instance { gamma, beta } => {
                let mean = x.mean_keepdim((2, 3))?;
                let centered = x.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim((2, 3))?;
                let normalized = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
                (gamma, beta, normalized)
            }
            Norm::Batch {
                gamma,
                beta,
                running_mean,
                running_var,
            } => {
                if training {
                    let (b, _, h, w) = x.dims4()?;
                    let mean = x.mean_keepdim((0, 2, 3))?;
                    let centered = x.broadcast_sub(&mean)?;
                    let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
                    let n = (b * h * w) as f64;
                    let unbiased = if n > 1.0 {
                        (&var * (n / (n - 1.0)))?
                    } else {
                        var.clone()
                    };
                    let batch_mean = mean.flatten_all()?.detach();
                    let batch_var = unbiased.flatten_all()?.detach();
                    running_mean.set(
                        &((running_mean.as_tensor() * (1.0 - BN_MOMENTUM))?
                            + (batch_mean * BN_MOMENTUM)?)?,
                    )?;
                    running_var.set(
                        &((running_var.as_tensor() * (1.0 - BN_MOMENTUM))?
                            + (batch_var * BN_MOMENTUM)?)?,
                    )?;
                    let normalized = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
                    (gamma, beta, normalized)
                } else {
                    let mean = channel_view(running_mean.as_tensor())?;
                    let std = (channel_view(running_var.as_tensor())? + NORM_EPS)?.sqrt()?;
                    (gamma, beta, x.broadcast_sub(&mean)?.broadcast_div(&std)?)
                }
            }
        };
        Ok(normalized
            .broadcast_mul(&channel_view(gamma.as_tensor())?)?
            .broadcast_add(&channel_view(beta.as_tensor())?)?)
    }
}

/// Pre-activation residual block:
/// `x + conv(relu(norm(conv(relu(norm(x))))))` with 3x3 convolutions.
#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    norm1: Norm,
    conv1: Conv2d,
    norm2: Norm,
    conv2: Conv2d,
}

impl ResBlock {
    pub(crate) fn new(
        f: &mut ParamFactory,
        name: &str,
        norm: NormKind,
        channels: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm1: f.norm(&format!("{name}.norm1"), norm, channels)?,
            conv1: f.conv(&format!("{name}.conv1"), channels, channels, 3, 1)?,
            norm2: f.norm(&format!("{name}.norm2"), norm, channels)?,
            conv2: f.conv(&format!("{name}.conv2"), channels, channels, 3, 1)?,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let y = self
            .conv1
            .forward(&self.norm1.forward(x, training)?.relu()?)?;
        let y = self
            .conv2
            .forward(&self.norm2.forward(&y, training)?.relu()?)?;
        Ok((y + x)?)
    }
}

/// Numerically stable softmax over the class axis (dim 1).
pub fn softmax_classes(logits: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(logits, 1)?)
}

/// `log_softmax` over the class axis (dim 1).
pub fn log_softmax_classes(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

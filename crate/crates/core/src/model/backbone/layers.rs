use candle_core::{Tensor, Var, D};

use super::depthwise::{depthwise_conv2d, same_pad};
use std::sync::Arc;

use super::params::{BnControl, Init, ParamStore};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// `(k - 1) / 2` on every side.
    Symmetric,
    /// TensorFlow "same": asymmetric for even totals.
    Same,
}

pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: Padding,
    depthwise: bool,
}

pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub depthwise: bool,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            in_ch,
            out_ch,
            kernel,
            stride,
            depthwise: false,
            bias: false,
        }
    }

    pub fn depthwise(channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            depthwise: true,
            ..Self::new(channels, channels, kernel, stride)
        }
    }

    pub fn with_bias(self) -> Self {
        ConvSpec { bias: true, ..self }
    }
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, prefix: &str, spec: ConvSpec, padding: Padding) -> Result<Self> {
        let in_per_group = if spec.depthwise { 1 } else { spec.in_ch };
        let groups = if spec.depthwise { spec.in_ch } else { 1 };
        let fan_out = spec.kernel * spec.kernel * spec.out_ch / groups;
        let weight = store.weight(
            &format!("{prefix}.weight"),
            &[spec.out_ch, in_per_group, spec.kernel, spec.kernel],
            Init::KaimingFanOut { fan_out },
        )?;
        let bias = if spec.bias {
            Some(store.weight(&format!("{prefix}.bias"), &[spec.out_ch], Init::Zeros)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride: spec.stride,
            padding,
            depthwise: spec.depthwise,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let k = self.weight.dim(2)?;
        let y = if self.depthwise {
            depthwise_conv2d(x, &self.weight, self.padding == Padding::Same, self.stride)?
        } else {
            match self.padding {
                Padding::Symmetric => x.conv2d(&self.weight, (k - 1) / 2, self.stride, 1, 1)?,
                Padding::Same => {
                    let (_, _, h, w) = x.dims4()?;
                    let (_, ph) = same_pad(h, k, self.stride);
                    let (_, pw) = same_pad(w, k, self.stride);
                    let x = if ph > 0 || pw > 0 {
                        x.pad_with_zeros(2, ph / 2, ph - ph / 2)?
                            .pad_with_zeros(3, pw / 2, pw - pw / 2)?
                    } else {
                        x.clone()
                    };
                    x.conv2d(&self.weight, 0, self.stride, 1, 1)?
                }
            }
        };
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Batch normalization over `(N, H, W)` with running statistics.
pub struct BatchNorm {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
    control: Arc<BnControl>,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, eps: f64) -> Result<Self> {
        Self::with_scale_init(store, prefix, channels, eps, Init::Ones)
    }

    /// `Init::Zeros` makes a residual branch start as the identity.
    pub fn with_scale_init(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        eps: f64,
        scale: Init,
    ) -> Result<Self> {
        Ok(BatchNorm {
            weight: store.weight(&format!("{prefix}.weight"), &[channels], scale)?,
            bias: store.weight(&format!("{prefix}.bias"), &[channels], Init::Zeros)?,
            running_mean: store.buffer(&format!("{prefix}.running_mean"), &[channels], Init::Zeros)?,
            running_var: store.buffer(&format!("{prefix}.running_var"), &[channels], Init::Ones)?,
            eps,
            // Keras default (0.99 decay)
            momentum: 0.01,
            control: store.bn_control(),
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let shape = (1, (), 1, 1);
        let (mean, var) = if train {
            let (n, _, h, w) = x.dims4()?;
            let mean = x.mean_keepdim((0, 2, 3))?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
            let count = (n * h * w) as f64;
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = self.control.momentum_or(self.momentum);
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.detach().flatten_all()? * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                + (var.detach().flatten_all()? * (m * unbiased))?)?;
            self.running_mean.set(&new_mean.detach())?;
            self.running_var.set(&new_var.detach())?;
            (mean, var)
        } else {
            (
                self.running_mean.as_detached_tensor().reshape(shape)?,
                self.running_var.as_detached_tensor().reshape(shape)?,
            )
        };
        let inv_std = (var + self.eps)?.sqrt()?.recip()?;
        let scale = inv_std.broadcast_mul(&self.weight.reshape(shape)?)?;
        Ok(x
            .broadcast_sub(&mean)?
            .broadcast_mul(&scale)?
            .broadcast_add(&self.bias.reshape(shape)?)?)
    }
}

/// Channel attention: global pool, reduce, SiLU, expand, sigmoid gate.
pub struct SqueezeExcite {
    reduce: Conv2d,
    expand: Conv2d,
}

impl SqueezeExcite {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, reduced: usize) -> Result<Self> {
        Ok(SqueezeExcite {
            reduce: Conv2d::new(
                store,
                &format!("{prefix}.conv_reduce"),
                ConvSpec::new(channels, reduced, 1, 1).with_bias(),
                Padding::Symmetric,
            )?,
            expand: Conv2d::new(
                store,
                &format!("{prefix}.conv_expand"),
                ConvSpec::new(reduced, channels, 1, 1).with_bias(),
                Padding::Symmetric,
            )?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
        let s = self.reduce.forward(&s)?.silu()?;
        let gate = sigmoid(&self.expand.forward(&s)?)?;
        Ok(x.broadcast_mul(&gate)?)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Conv, batch norm, and an optional activation.
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub act: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Silu,
}

impl Activation {
    pub fn apply(self, x: Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::None => x,
            Activation::Relu => x.relu()?,
            Activation::Silu => x.silu()?,
        })
    }
}

impl ConvBn {
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.act.apply(self.bn.forward(&self.conv.forward(x)?, train)?)
    }
}

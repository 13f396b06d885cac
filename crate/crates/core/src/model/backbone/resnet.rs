//! ResNet-50 feature extractor (bottleneck v1.5, stride on the 3x3 conv),
//! classifier removed. Tensor names follow the timm checkpoint layout.

use candle_core::Tensor;

use super::layers::{Activation, BatchNorm, Conv2d, ConvBn, ConvSpec, Padding};
use super::params::{Init, ParamStore};
use super::Backbone;
use crate::error::Result;

const EPS: f64 = 1e-5;
const STAGES: [(usize, usize); 4] = [(64, 3), (128, 4), (256, 6), (512, 3)];
const EXPANSION: usize = 4;

struct Bottleneck {
    conv1: ConvBn,
    conv2: ConvBn,
    conv3: ConvBn,
    downsample: Option<ConvBn>,
}

impl Bottleneck {
    fn new(store: &mut ParamStore, prefix: &str, in_ch: usize, width: usize, stride: usize) -> Result<Self> {
        let out_ch = width * EXPANSION;
        let conv1 = conv_bn(store, prefix, 1, ConvSpec::new(in_ch, width, 1, 1), Activation::Relu, Init::Ones)?;
        let conv2 = conv_bn(store, prefix, 2, ConvSpec::new(width, width, 3, stride), Activation::Relu, Init::Ones)?;
        let conv3 = conv_bn(store, prefix, 3, ConvSpec::new(width, out_ch, 1, 1), Activation::None, Init::Ones)?;
        let downsample = if stride != 1 || in_ch != out_ch {
            Some(ConvBn {
                conv: Conv2d::new(
                    store,
                    &format!("{prefix}.downsample.0"),
                    ConvSpec::new(in_ch, out_ch, 1, stride),
                    Padding::Symmetric,
                )?,
                bn: BatchNorm::new(store, &format!("{prefix}.downsample.1"), out_ch, EPS)?,
                act: Activation::None,
            })
        } else {
            None
        };
        Ok(Bottleneck {
            conv1,
            conv2,
            conv3,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.conv1.forward(x, train)?;
        let y = self.conv2.forward(&y, train)?;
        let y = self.conv3.forward(&y, train)?;
        let shortcut = match &self.downsample {
            Some(d) => d.forward(x, train)?,
            None => x.clone(),
        };
        Ok((y + shortcut)?.relu()?)
    }
}

fn conv_bn(
    store: &mut ParamStore,
    prefix: &str,
    idx: usize,
    spec: ConvSpec,
    act: Activation,
    scale: Init,
) -> Result<ConvBn> {
    let out_ch = spec.out_ch;
    Ok(ConvBn {
        conv: Conv2d::new(store, &format!("{prefix}.conv{idx}"), spec, Padding::Symmetric)?,
        bn: BatchNorm::with_scale_init(store, &format!("{prefix}.bn{idx}"), out_ch, EPS, scale)?,
        act,
    })
}

pub struct ResNet50 {
    stem: ConvBn,
    blocks: Vec<Bottleneck>,
}

impl ResNet50 {
    pub fn new(store: &mut ParamStore) -> Result<Self> {
        let stem = ConvBn {
            conv: Conv2d::new(store, "conv1", ConvSpec::new(3, 64, 7, 2), Padding::Symmetric)?,
            bn: BatchNorm::new(store, "bn1", 64, EPS)?,
            act: Activation::Relu,
        };
        let mut blocks = Vec::new();
        let mut in_ch = 64;
        for (stage, &(width, depth)) in STAGES.iter().enumerate() {
            for i in 0..depth {
                let stride = if i == 0 && stage > 0 { 2 } else { 1 };
                let prefix = format!("layer{}.{i}", stage + 1);
                blocks.push(Bottleneck::new(store, &prefix, in_ch, width, stride)?);
                in_ch = width * EXPANSION;
            }
        }
        Ok(ResNet50 { stem, blocks })
    }
}

impl Backbone for ResNet50 {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.stem.forward(x, train)?;
        let mut y = if train { max_pool_3x3_s2_differentiable(&y)? } else { max_pool_3x3_s2(&y)? };
        for block in &self.blocks {
            y = block.forward(&y, train)?;
        }
        Ok(y)
    }
}

// Inputs are post-ReLU, so zero padding is equivalent to -inf padding.
fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let y = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    Ok(y.max_pool2d_with_stride(3, 2)?)
}

/// Same values as [`max_pool_3x3_s2`], built from ops that support
/// backpropagation: the max over the nine stride-2 shifted views.
fn max_pool_3x3_s2_differentiable(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
    // one extra trailing row/column keeps every 2*out window in range; it
    // is never selected
    let p = x.pad_with_zeros(2, 1, 2)?.pad_with_zeros(3, 1, 2)?;
    let mut out: Option<Tensor> = None;
    for dy in 0..3 {
        let rows = p
            .narrow(2, dy, 2 * oh)?
            .reshape((n, c, oh, 2, w + 3))?
            .narrow(3, 0, 1)?
            .squeeze(3)?;
        for dx in 0..3 {
            let view = rows
                .narrow(3, dx, 2 * ow)?
                .reshape((n, c, oh, ow, 2))?
                .narrow(4, 0, 1)?
                .squeeze(4)?;
            out = Some(match out {
                None => view,
                Some(acc) => acc.maximum(&view)?,
            });
        }
    }
    Ok(out.expect("nine views"))
}

#[cfg(test)]
mod tests {
    use candle_core::{Device, Var};

    use super::*;

    #[test]
    fn differentiable_max_pool_matches_native() {
        for (h, w) in [(8, 8), (7, 9), (1, 1), (2, 5)] {
            let x = Tensor::rand(0f32, 1.0, (2, 3, h, w), &Device::Cpu).unwrap();
            let a = max_pool_3x3_s2(&x).unwrap();
            let b = max_pool_3x3_s2_differentiable(&x).unwrap();
            assert_eq!(a.dims(), b.dims());
            let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(diff, 0.0, "{h}x{w}");
        }
    }

    #[test]
    fn max_pool_gradient_routes_to_window_maxima() {
        // distinct values so each window has a unique maximum
        let values: Vec<f32> = (0..25).map(|i| ((i * 7) % 25) as f32).collect();
        let x = Var::from_vec(values.clone(), (1, 1, 5, 5), &Device::Cpu).unwrap();
        let y = max_pool_3x3_s2_differentiable(x.as_tensor()).unwrap();
        let grads = y.sum_all().unwrap().backward().unwrap();
        let g: Vec<f32> = grads.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let mut expected = vec![0f32; 25];
        for oy in 0..3 {
            for ox in 0..3 {
                let mut best = (f32::MIN, 0);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = ((oy * 2 + ky) as isize - 1, (ox * 2 + kx) as isize - 1);
                        if (0..5).contains(&iy) && (0..5).contains(&ix) {
                            let idx = (iy * 5 + ix) as usize;
                            if values[idx] > best.0 {
                                best = (values[idx], idx);
                            }
                        }
                    }
                }
                expected[best.1] += 1.0;
            }
        }
        assert_eq!(g, expected);
    }
}

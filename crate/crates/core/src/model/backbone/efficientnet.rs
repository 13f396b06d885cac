//! EfficientNet (B-series) and EfficientNetV2 (B-series) feature
//! extractors, classifier removed. Tensor names follow the timm layout.

use candle_core::Tensor;

use super::layers::{Activation, BatchNorm, Conv2d, ConvBn, ConvSpec, Padding, SqueezeExcite};
use super::params::ParamStore;
use super::Backbone;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlockKind {
    /// conv + BN + act
    ConvBnAct,
    /// fused expansion conv + projection
    EdgeResidual,
    /// depthwise + SE + pointwise, no expansion
    DepthwiseSeparable,
    /// MBConv: expand, depthwise, SE, project
    InvertedResidual,
}

#[derive(Debug, Clone, Copy)]
struct StageDef {
    kind: BlockKind,
    repeats: usize,
    kernel: usize,
    stride: usize,
    expand: usize,
    out_ch: usize,
    se_ratio: Option<f64>,
}

const fn stage(
    kind: BlockKind,
    repeats: usize,
    kernel: usize,
    stride: usize,
    expand: usize,
    out_ch: usize,
    se_ratio: Option<f64>,
) -> StageDef {
    StageDef {
        kind,
        repeats,
        kernel,
        stride,
        expand,
        out_ch,
        se_ratio,
    }
}

use BlockKind::*;

const V1_BASE: [StageDef; 7] = [
    stage(DepthwiseSeparable, 1, 3, 1, 1, 16, Some(0.25)),
    stage(InvertedResidual, 2, 3, 2, 6, 24, Some(0.25)),
    stage(InvertedResidual, 2, 5, 2, 6, 40, Some(0.25)),
    stage(InvertedResidual, 3, 3, 2, 6, 80, Some(0.25)),
    stage(InvertedResidual, 3, 5, 1, 6, 112, Some(0.25)),
    stage(InvertedResidual, 4, 5, 2, 6, 192, Some(0.25)),
    stage(InvertedResidual, 1, 3, 1, 6, 320, Some(0.25)),
];

const V2_BASE: [StageDef; 6] = [
    stage(ConvBnAct, 1, 3, 1, 1, 16, None),
    stage(EdgeResidual, 2, 3, 2, 4, 32, None),
    stage(EdgeResidual, 2, 3, 2, 4, 48, None),
    stage(InvertedResidual, 3, 3, 2, 4, 96, Some(0.25)),
    stage(InvertedResidual, 5, 3, 1, 6, 112, Some(0.25)),
    stage(InvertedResidual, 8, 3, 2, 6, 192, Some(0.25)),
];

/// Compound-scaling coefficients and numerical conventions of one variant.
#[derive(Debug, Clone, Copy)]
pub struct EfficientNetConfig {
    stages: &'static [StageDef],
    width: f64,
    depth: f64,
    stem: usize,
    head: usize,
    padding: Padding,
    bn_eps: f64,
}

impl EfficientNetConfig {
    pub const B1: Self = EfficientNetConfig {
        stages: &V1_BASE,
        width: 1.0,
        depth: 1.1,
        stem: 32,
        head: 1280,
        padding: Padding::Symmetric,
        bn_eps: 1e-5,
    };

    /// TensorFlow-ported weights: "same" padding and epsilon 1e-3.
    pub const B7: Self = EfficientNetConfig {
        stages: &V1_BASE,
        width: 2.0,
        depth: 3.1,
        stem: 32,
        head: 1280,
        padding: Padding::Same,
        bn_eps: 1e-3,
    };

    pub const V2_B1: Self = EfficientNetConfig {
        stages: &V2_BASE,
        width: 1.0,
        depth: 1.1,
        stem: 32,
        head: 1280,
        padding: Padding::Same,
        bn_eps: 1e-3,
    };

    pub fn channels(&self, base: usize) -> usize {
        make_divisible(base as f64 * self.width, 8)
    }

    fn repeats(&self, base: usize) -> usize {
        (base as f64 * self.depth).ceil() as usize
    }

    pub fn feature_channels(&self) -> usize {
        self.channels(self.head)
    }
}

/// Round to a multiple of `divisor`, never dropping more than 10%.
fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut rounded = (((v + d / 2.0) / d).floor() * d).max(d);
    if rounded < 0.9 * v {
        rounded += d;
    }
    rounded as usize
}

struct Block {
    expand: Option<ConvBn>,
    depthwise: Option<ConvBn>,
    se: Option<SqueezeExcite>,
    project: Option<ConvBn>,
    residual: bool,
}

impl Block {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &EfficientNetConfig,
        def: &StageDef,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> Result<Self> {
        let pad = cfg.padding;
        let eps = cfg.bn_eps;
        let conv_bn = |store: &mut ParamStore, conv: &str, bn: &str, spec: ConvSpec, act: Activation| {
            let out = spec.out_ch;
            Ok::<_, crate::Error>(ConvBn {
                conv: Conv2d::new(store, &format!("{prefix}.{conv}"), spec, pad)?,
                bn: BatchNorm::new(store, &format!("{prefix}.{bn}"), out, eps)?,
                act,
            })
        };
        let se = |store: &mut ParamStore, channels: usize| {
            def.se_ratio
                .map(|r| {
                    let reduced = ((in_ch as f64 * r) as usize).max(1);
                    SqueezeExcite::new(store, &format!("{prefix}.se"), channels, reduced)
                })
                .transpose()
        };
        let k = def.kernel;
        let mut block = Block {
            expand: None,
            depthwise: None,
            se: None,
            project: None,
            residual: stride == 1 && in_ch == out_ch,
        };
        match def.kind {
            ConvBnAct => {
                block.expand = Some(conv_bn(store, "conv", "bn1", ConvSpec::new(in_ch, out_ch, k, stride), Activation::Silu)?);
            }
            EdgeResidual => {
                let mid = in_ch * def.expand;
                block.expand = Some(conv_bn(store, "conv_exp", "bn1", ConvSpec::new(in_ch, mid, k, stride), Activation::Silu)?);
                block.se = se(store, mid)?;
                block.project = Some(conv_bn(store, "conv_pwl", "bn2", ConvSpec::new(mid, out_ch, 1, 1), Activation::None)?);
            }
            DepthwiseSeparable => {
                block.depthwise = Some(conv_bn(store, "conv_dw", "bn1", ConvSpec::depthwise(in_ch, k, stride), Activation::Silu)?);
                block.se = se(store, in_ch)?;
                block.project = Some(conv_bn(store, "conv_pw", "bn2", ConvSpec::new(in_ch, out_ch, 1, 1), Activation::None)?);
            }
            InvertedResidual => {
                let mid = in_ch * def.expand;
                block.expand = Some(conv_bn(store, "conv_pw", "bn1", ConvSpec::new(in_ch, mid, 1, 1), Activation::Silu)?);
                block.depthwise = Some(conv_bn(store, "conv_dw", "bn2", ConvSpec::depthwise(mid, k, stride), Activation::Silu)?);
                block.se = se(store, mid)?;
                block.project = Some(conv_bn(store, "conv_pwl", "bn3", ConvSpec::new(mid, out_ch, 1, 1), Activation::None)?);
            }
        }
        Ok(block)
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = x.clone();
        for layer in [&self.expand, &self.depthwise].into_iter().flatten() {
            y = layer.forward(&y, train)?;
        }
        if let Some(se) = &self.se {
            y = se.forward(&y)?;
        }
        if let Some(project) = &self.project {
            y = project.forward(&y, train)?;
        }
        if self.residual {
            y = (y + x)?;
        }
        Ok(y)
    }
}

pub struct EfficientNet {
    stem: ConvBn,
    blocks: Vec<Block>,
    head: ConvBn,
}

impl EfficientNet {
    pub fn new(store: &mut ParamStore, cfg: &EfficientNetConfig) -> Result<Self> {
        let stem_ch = cfg.channels(cfg.stem);
        let stem = ConvBn {
            conv: Conv2d::new(store, "conv_stem", ConvSpec::new(3, stem_ch, 3, 2), cfg.padding)?,
            bn: BatchNorm::new(store, "bn1", stem_ch, cfg.bn_eps)?,
            act: Activation::Silu,
        };
        let mut blocks = Vec::new();
        let mut in_ch = stem_ch;
        for (s, def) in cfg.stages.iter().enumerate() {
            let out_ch = cfg.channels(def.out_ch);
            for i in 0..cfg.repeats(def.repeats) {
                let stride = if i == 0 { def.stride } else { 1 };
                blocks.push(Block::new(store, &format!("blocks.{s}.{i}"), cfg, def, in_ch, out_ch, stride)?);
                in_ch = out_ch;
            }
        }
        let head_ch = cfg.feature_channels();
        let head = ConvBn {
            conv: Conv2d::new(store, "conv_head", ConvSpec::new(in_ch, head_ch, 1, 1), cfg.padding)?,
            bn: BatchNorm::new(store, "bn2", head_ch, cfg.bn_eps)?,
            act: Activation::Silu,
        };
        Ok(EfficientNet { stem, blocks, head })
    }
}

impl Backbone for EfficientNet {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = self.stem.forward(x, train)?;
        for block in &self.blocks {
            y = block.forward(&y, train)?;
        }
        self.head.forward(&y, train)
    }
}

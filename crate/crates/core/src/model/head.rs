//! The dense classification head: spatial average pooling to a fixed grid,
//! flatten, dense/ReLU/dropout stacks, and a final dense layer whose logits
//! feed a softmax. Forward and backward passes are explicit and run in f64.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Array4, ArrayView2, ArrayView4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolingMode {
    /// Adaptive average pooling to `pooled_spatial`, for any feature size.
    #[serde(rename = "adaptive_4x4")]
    Adaptive,
    /// Non-overlapping 2x2 average pooling (valid padding).
    #[serde(rename = "kernel_2x2")]
    Kernel2x2,
}

impl PoolingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolingMode::Adaptive => "adaptive_4x4",
            PoolingMode::Kernel2x2 => "kernel_2x2",
        }
    }

    /// Output grid for a feature map of `feature_hw`.
    pub fn output_grid(self, adaptive_grid: (usize, usize), feature_hw: (usize, usize)) -> (usize, usize) {
        match self {
            PoolingMode::Adaptive => adaptive_grid,
            PoolingMode::Kernel2x2 => (feature_hw.0 / 2, feature_hw.1 / 2),
        }
    }
}

impl FromStr for PoolingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adaptive_4x4" => Ok(PoolingMode::Adaptive),
            "kernel_2x2" => Ok(PoolingMode::Kernel2x2),
            other => Err(format!("unknown pooling mode `{other}` (adaptive_4x4 or kernel_2x2)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    /// Grid after pooling.
    pub pooled_spatial: (usize, usize),
    pub pooling: PoolingMode,
    pub dense_widths: Vec<usize>,
    pub dropout_rate: f64,
    pub num_classes: usize,
}

impl Default for HeadSpec {
    fn default() -> Self {
        HeadSpec {
            pooled_spatial: (4, 4),
            pooling: PoolingMode::Adaptive,
            dense_widths: vec![1024, 1024],
            dropout_rate: 0.5,
            num_classes: 4,
        }
    }
}

impl HeadSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.dense_widths.is_empty() || self.dense_widths.contains(&0) {
            return Err(Error::Config("dense widths must be non-empty and positive".into()));
        }
        if self.pooled_spatial.0 == 0 || self.pooled_spatial.1 == 0 {
            return Err(Error::Config("pooled grid must be non-empty".into()));
        }
        Ok(())
    }

    pub fn flatten_width(&self, feature_channels: usize) -> usize {
        self.pooled_spatial.0 * self.pooled_spatial.1 * feature_channels
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    AveragePooling { grid: (usize, usize) },
    Flatten,
    Dense { fan_in: usize, fan_out: usize },
    Dropout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDesc {
    pub kind: LayerKind,
    pub name: String,
    pub output_shape: Vec<usize>,
    pub parameters: usize,
}

/// Layer-by-layer shapes of a head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLayout {
    pub feature_channels: usize,
    pub layers: Vec<LayerDesc>,
}

impl HeadLayout {
    pub fn output_sizes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|l| l.output_shape.iter().product())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.parameters).sum()
    }

    pub fn flatten_width(&self) -> usize {
        self.layers
            .iter()
            .find(|l| l.kind == LayerKind::Flatten)
            .map(|l| l.output_shape[0])
            .unwrap_or(0)
    }
}

impl fmt::Display for HeadLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:<16} {:>12}", "layer", "output", "params")?;
        for l in &self.layers {
            let shape = l
                .output_shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            writeln!(f, "{:<16} {:<16} {:>12}", l.name, shape, l.parameters)?;
        }
        write!(f, "total parameters: {}", self.parameter_count())
    }
}

pub fn build_head(feature_channels: usize, spec: &HeadSpec) -> Result<HeadLayout> {
    if feature_channels == 0 {
        return Err(Error::Argument("feature_channels must be positive".into()));
    }
    spec.validate()?;
    let (gh, gw) = spec.pooled_spatial;
    let flat = spec.flatten_width(feature_channels);
    let mut layers = vec![
        LayerDesc {
            kind: LayerKind::AveragePooling { grid: (gh, gw) },
            name: "average_pooling".into(),
            output_shape: vec![gh, gw, feature_channels],
            parameters: 0,
        },
        LayerDesc {
            kind: LayerKind::Flatten,
            name: "flatten".into(),
            output_shape: vec![flat],
            parameters: 0,
        },
    ];
    let mut fan_in = flat;
    for &width in &spec.dense_widths {
        layers.push(dense_desc(fan_in, width));
        layers.push(LayerDesc {
            kind: LayerKind::Dropout,
            name: format!("dropout({})", spec.dropout_rate),
            output_shape: vec![width],
            parameters: 0,
        });
        fan_in = width;
    }
    layers.push(dense_desc(fan_in, spec.num_classes));
    Ok(HeadLayout {
        feature_channels,
        layers,
    })
}

fn dense_desc(fan_in: usize, fan_out: usize) -> LayerDesc {
    LayerDesc {
        kind: LayerKind::Dense { fan_in, fan_out },
        name: "dense".into(),
        output_shape: vec![fan_out],
        parameters: (fan_in + 1) * fan_out,
    }
}

/// `[start, end)` ranges of each pooling bin along one axis.
fn bins(mode: PoolingMode, input: usize, grid: usize) -> Result<Vec<(usize, usize)>> {
    match mode {
        PoolingMode::Adaptive => {
            if input == 0 {
                return Err(Error::Shape("cannot pool an empty feature map".into()));
            }
            Ok((0..grid)
                .map(|i| ((i * input) / grid, ((i + 1) * input).div_ceil(grid)))
                .collect())
        }
        PoolingMode::Kernel2x2 => {
            if input / 2 != grid {
                return Err(Error::Shape(format!(
                    "2x2 pooling of {input} cells yields {}, head expects {grid}",
                    input / 2
                )));
            }
            Ok((0..grid).map(|i| (2 * i, 2 * i + 2)).collect())
        }
    }
}

/// Pool `(N, C, H, W)` feature maps and flatten in `(h, w, c)` order.
pub fn pool_and_flatten(features: ArrayView4<f64>, spec: &HeadSpec) -> Result<Array2<f64>> {
    let (n, c, h, w) = features.dim();
    let (gh, gw) = spec.pooled_spatial;
    let rows = bins(spec.pooling, h, gh)?;
    let cols = bins(spec.pooling, w, gw)?;
    let mut out = Array2::zeros((n, gh * gw * c));
    for (i, &(y0, y1)) in rows.iter().enumerate() {
        for (j, &(x0, x1)) in cols.iter().enumerate() {
            let area = ((y1 - y0) * (x1 - x0)) as f64;
            let cell = features
                .slice(s![.., .., y0..y1, x0..x1])
                .sum_axis(Axis(3))
                .sum_axis(Axis(2))
                / area;
            let base = (i * gw + j) * c;
            out.slice_mut(s![.., base..base + c]).assign(&cell);
        }
    }
    Ok(out)
}

/// Gradient of [`pool_and_flatten`] with respect to its input.
pub fn pool_backward(grad: ArrayView2<f64>, input_dims: (usize, usize, usize, usize), spec: &HeadSpec) -> Result<Array4<f64>> {
    let (n, c, h, w) = input_dims;
    let (gh, gw) = spec.pooled_spatial;
    let rows = bins(spec.pooling, h, gh)?;
    let cols = bins(spec.pooling, w, gw)?;
    let mut out = Array4::zeros((n, c, h, w));
    for (i, &(y0, y1)) in rows.iter().enumerate() {
        for (j, &(x0, x1)) in cols.iter().enumerate() {
            let area = ((y1 - y0) * (x1 - x0)) as f64;
            let base = (i * gw + j) * c;
            let g = grad.slice(s![.., base..base + c]);
            for y in y0..y1 {
                for x in x0..x1 {
                    let mut target = out.slice_mut(s![.., .., y, x]);
                    target.scaled_add(1.0 / area, &g);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `(fan_in, fan_out)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Trainable head parameters in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub layers: Vec<Dense>,
}

/// Randomness of one training-mode forward pass.
pub enum Mode<'a> {
    Inference,
    Train(&'a mut dyn rand::RngCore),
}

/// Activations kept for the backward pass.
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
}

impl HeadParams {
    /// Uniform fan-in scaled weights (He limit `sqrt(6 / fan_in)`), zero biases.
    pub fn init<R: Rng + ?Sized>(flatten_width: usize, spec: &HeadSpec, rng: &mut R) -> Self {
        let mut layers = Vec::new();
        let mut fan_in = flatten_width;
        for &fan_out in spec.dense_widths.iter().chain(std::iter::once(&spec.num_classes)) {
            let limit = (6.0 / fan_in as f64).sqrt();
            let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-limit..limit));
            layers.push(Dense {
                weight,
                bias: Array1::zeros(fan_out),
            });
            fan_in = fan_out;
        }
        HeadParams { layers }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|d| d.weight.len() + d.bias.len()).sum()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    /// Logits for pooled, flattened features. Hidden layers are
    /// dense -> ReLU -> inverted dropout.
    pub fn forward(&self, x: ArrayView2<f64>, dropout_rate: f64, mode: Mode<'_>) -> Result<(Array2<f64>, ForwardCache)> {
        if x.ncols() != self.input_width() {
            return Err(Error::Shape(format!(
                "head expects {} input features, got {}",
                self.input_width(),
                x.ncols()
            )));
        }
        let mut rng = match mode {
            Mode::Inference => None,
            Mode::Train(rng) => Some(rng),
        };
        let last = self.layers.len() - 1;
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre_activations: Vec::with_capacity(last),
            masks: Vec::with_capacity(last),
        };
        let mut a = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = a.dot(&layer.weight) + &layer.bias;
            cache.inputs.push(a);
            if i == last {
                return Ok((z, cache));
            }
            let mut act = z.mapv(|v| v.max(0.0));
            let mask = match rng.as_deref_mut() {
                Some(rng) if dropout_rate > 0.0 => {
                    let keep = 1.0 - dropout_rate;
                    let mask = Array2::from_shape_simple_fn(act.dim(), || {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    act *= &mask;
                    Some(mask)
                }
                _ => None,
            };
            cache.pre_activations.push(z);
            cache.masks.push(mask);
            a = act;
        }
        unreachable!("head has at least one layer")
    }

    /// Parameter gradients and, optionally, the gradient with respect to
    /// the head input.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: ArrayView2<f64>, want_input_grad: bool) -> (HeadParams, Option<Array2<f64>>) {
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut delta = grad_logits.to_owned();
        let mut input_grad = None;
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            grads.push(Dense {
                weight: cache.inputs[i].t().dot(&delta),
                bias: delta.sum_axis(Axis(0)),
            });
            if i == 0 {
                if want_input_grad {
                    input_grad = Some(delta.dot(&layer.weight.t()));
                }
                break;
            }
            let mut d = delta.dot(&layer.weight.t());
            if let Some(mask) = &cache.masks[i - 1] {
                d *= mask;
            }
            ndarray::Zip::from(&mut d)
                .and(&cache.pre_activations[i - 1])
                .for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            delta = d;
        }
        grads.reverse();
        (HeadParams { layers: grads }, input_grad)
    }

    /// Every tensor as a mutable flat slice, in a stable order.
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|d| {
                [
                    d.weight.as_slice_mut().expect("standard layout"),
                    d.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|d| {
                [
                    d.weight.as_slice().expect("standard layout"),
                    d.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }
}

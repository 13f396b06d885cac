//! Backbone + head classifier construction, inference, and parameter
//! bookkeeping.

pub mod backbone;
pub mod checkpoint;
pub mod head;
pub mod registry;
pub mod weights;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array4, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::augment::{PixelTensor, ValueRange};
use crate::error::{Error, Result};
use crate::seed;
use backbone::{build_backbone, Backbone, ParamKind, ParamStore};
use head::{pool_and_flatten, HeadParams, HeadSpec, Mode};
pub use registry::{BackboneId, BackboneInfo};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    ImagenetPretrained,
    Random,
}

impl WeightInit {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightInit::ImagenetPretrained => "imagenet_pretrained",
            WeightInit::Random => "random",
        }
    }
}

impl FromStr for WeightInit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "imagenet_pretrained" => Ok(WeightInit::ImagenetPretrained),
            "random" => Ok(WeightInit::Random),
            other => Err(format!("unknown weights `{other}` (imagenet_pretrained or random)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableScope {
    All,
    HeadOnly,
}

impl TrainableScope {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainableScope::All => "all",
            TrainableScope::HeadOnly => "head_only",
        }
    }
}

impl FromStr for TrainableScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(TrainableScope::All),
            "head_only" => Ok(TrainableScope::HeadOnly),
            other => Err(format!("unknown trainable scope `{other}` (all or head_only)")),
        }
    }
}

impl fmt::Display for TrainableScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountScope {
    All,
    Trainable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneSpec {
    pub id: BackboneId,
    /// `(height, width)`; inputs always carry three channels.
    pub input_size: (usize, usize),
    pub weights: WeightInit,
}

impl BackboneSpec {
    pub fn new(id: BackboneId, input_size: (usize, usize), weights: WeightInit) -> Self {
        BackboneSpec { id, input_size, weights }
    }

    pub fn feature_channels(&self) -> usize {
        self.id.info().feature_channels
    }

    pub fn feature_grid(&self) -> (usize, usize) {
        self.id.feature_grid(self.input_size.0, self.input_size.1)
    }

    pub fn validate(&self) -> Result<()> {
        let min = self.id.info().min_input;
        let (h, w) = self.input_size;
        if h < min || w < min {
            return Err(Error::Config(format!(
                "{} needs inputs of at least {min}x{min}, got {h}x{w}",
                self.id
            )));
        }
        Ok(())
    }
}

/// Where to look for pretrained weights and how to seed random init.
#[derive(Debug, Clone, Default)]
pub struct BuildOptions {
    pub seed: u64,
    pub cache_dir: Option<PathBuf>,
}

pub struct ModelHandle {
    pub backbone_spec: BackboneSpec,
    pub head_spec: HeadSpec,
    pub scope: TrainableScope,
    pub(crate) backbone: Box<dyn Backbone>,
    pub(crate) store: ParamStore,
    pub(crate) head: HeadParams,
}

impl fmt::Debug for ModelHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelHandle")
            .field("backbone", &self.backbone_spec)
            .field("head", &self.head_spec)
            .field("scope", &self.scope)
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

pub fn build_model(
    backbone_spec: BackboneSpec,
    head_spec: HeadSpec,
    scope: TrainableScope,
    options: &BuildOptions,
) -> Result<ModelHandle> {
    backbone_spec.validate()?;
    let layout = head::build_head(backbone_spec.feature_channels(), &head_spec)?;
    if head_spec.pooling == head::PoolingMode::Kernel2x2 {
        let (fh, fw) = backbone_spec.feature_grid();
        if (fh / 2, fw / 2) != head_spec.pooled_spatial {
            return Err(Error::Config(format!(
                "2x2 pooling of a {fh}x{fw} feature map gives {}x{}, but the head expects {}x{}",
                fh / 2,
                fw / 2,
                head_spec.pooled_spatial.0,
                head_spec.pooled_spatial.1
            )));
        }
    }

    let mut store = ParamStore::new(
        seed::derive_seed_indexed(options.seed, seed::role::INIT, &[0]),
        scope == TrainableScope::All,
    );
    let backbone = build_backbone(backbone_spec.id, &mut store)?;
    if backbone_spec.weights == WeightInit::ImagenetPretrained {
        let info = backbone_spec.id.info();
        let cache = weights::cache_dir(options.cache_dir.as_deref());
        let path = weights::fetch_weights(&info.weights, &cache)?;
        let tensors = candle_core::safetensors::load(&path, &Device::Cpu)?;
        store.load_from(&tensors, &path.display().to_string())?;
        log::info!("loaded {} weights from {}", info.display_name, path.display());
    }
    let mut init_rng = seed::rng_for_indexed(options.seed, seed::role::INIT, &[1]);
    let head = HeadParams::init(layout.flatten_width(), &head_spec, &mut init_rng);
    Ok(ModelHandle {
        backbone_spec,
        head_spec,
        scope,
        backbone,
        store,
        head,
    })
}

pub fn count_parameters(handle: &ModelHandle, scope: CountScope) -> usize {
    let backbone = handle.store.count(ParamKind::Weight);
    let head = handle.head.parameter_count();
    match (scope, handle.scope) {
        (CountScope::All, _) | (CountScope::Trainable, TrainableScope::All) => backbone + head,
        (CountScope::Trainable, TrainableScope::HeadOnly) => head,
    }
}

/// Stack normalized `(H, W, 3)` images into an `(N, 3, H, W)` tensor.
pub fn batch_tensor(images: &[PixelTensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Argument("cannot build an empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::Shape(format!(
                "batch mixes {h}x{w} and {}x{} images",
                img.height(),
                img.width()
            )));
        }
        if img.range() != ValueRange::BackboneNormalized {
            return Err(Error::Precondition("batch images must be backbone-normalized".into()));
        }
        let chw = img.data().view().permuted_axes([2, 0, 1]);
        data.extend(chw.iter().copied());
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), &Device::Cpu)?)
}

/// Copy an `(N, C, H, W)` f32 tensor into an f64 array.
pub fn tensor_to_array4(t: &Tensor) -> Result<Array4<f64>> {
    let dims = t.dims4()?;
    let values: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    Array4::from_shape_vec(dims, values).map_err(|e| Error::Shape(e.to_string()))
}

pub fn array4_to_tensor(a: &Array4<f64>) -> Result<Tensor> {
    let values: Vec<f32> = a.iter().map(|&v| v as f32).collect();
    Ok(Tensor::from_vec(values, a.dim(), &Device::Cpu)?)
}

/// Row-wise softmax computed from shifted logits.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

impl ModelHandle {
    pub fn parameter_count(&self) -> usize {
        count_parameters(self, CountScope::All)
    }

    pub fn head_params(&self) -> &HeadParams {
        &self.head
    }

    pub fn head_params_mut(&mut self) -> &mut HeadParams {
        &mut self.head
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Final feature map. Frozen backbones always run batch norm in
    /// inference mode.
    pub fn backbone_features(&self, batch: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, h, w) = batch.dims4()?;
        if c != 3 || (h, w) != self.backbone_spec.input_size {
            return Err(Error::Shape(format!(
                "model expects (N, 3, {}, {}) input, got {:?}",
                self.backbone_spec.input_size.0,
                self.backbone_spec.input_size.1,
                batch.dims()
            )));
        }
        let train = train && self.scope == TrainableScope::All;
        self.backbone.forward(batch, train)
    }

    /// Replace batch-norm running statistics with the exact average of the
    /// batch statistics seen over `batches`. A randomly initialized
    /// backbone has placeholder statistics (mean 0, variance 1) that let
    /// activations vanish or explode with depth in inference mode; this
    /// data-dependent step rescales them to the data.
    pub fn calibrate_batch_norm(&mut self, batches: impl IntoIterator<Item = Tensor>) -> Result<usize> {
        let control = self.store.bn_control();
        let mut seen = 0;
        let result = (|| {
            for batch in batches {
                control.set_momentum(Some(1.0 / (seen + 1) as f64));
                self.backbone.forward(&batch.detach(), true)?;
                seen += 1;
            }
            Ok(seen)
        })();
        control.set_momentum(None);
        result
    }

    /// Pooled and flattened head input for a batch, in inference mode.
    pub fn pooled_features(&self, batch: &Tensor) -> Result<Array2<f64>> {
        let features = tensor_to_array4(&self.backbone_features(batch, false)?)?;
        self.pool(features.view())
    }

    pub fn pool(&self, features: ArrayView4<f64>) -> Result<Array2<f64>> {
        pool_and_flatten(features, &self.head_spec)
    }

    pub fn head_logits(&self, pooled: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self
            .head
            .forward(pooled.view(), self.head_spec.dropout_rate, Mode::Inference)?
            .0)
    }

    /// Inference-mode logits.
    pub fn logits(&self, batch: &Tensor) -> Result<Array2<f64>> {
        self.head_logits(&self.pooled_features(batch)?)
    }

    /// Inference-mode class probabilities; each row sums to one.
    pub fn forward(&self, batch: &Tensor) -> Result<Array2<f64>> {
        Ok(softmax(&self.logits(batch)?))
    }
}

#[cfg(test)]
mod tests {
    use ndarray::Array3;

    use super::*;

    fn tiny(id: BackboneId, scope: TrainableScope) -> ModelHandle {
        build_model(
            BackboneSpec::new(id, (64, 64), WeightInit::Random),
            HeadSpec { dense_widths: vec![16, 16], ..Default::default() },
            scope,
            &BuildOptions { seed: 5, cache_dir: None },
        )
        .unwrap()
    }

    fn input(n: usize, size: usize) -> Tensor {
        Tensor::randn(0f32, 1.0, (n, 3, size, size), &Device::Cpu).unwrap()
    }

    #[test]
    fn forward_rows_are_probabilities_and_deterministic() {
        let model = tiny(BackboneId::ResNet50, TrainableScope::All);
        let x = input(2, 64);
        let p = model.forward(&x).unwrap();
        assert_eq!(p.dim(), (2, 4));
        for row in p.rows() {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        assert_eq!(p, model.forward(&x).unwrap());
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let l = Array2::from_shape_vec((2, 3), vec![1e4, 0.0, -1e4, 800.0, 800.0, 800.0]).unwrap();
        let p = softmax(&l);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[[0, 0]] - 1.0).abs() < 1e-12);
        assert!((p[[1, 1]] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn scopes_change_trainable_count_only() {
        let all = tiny(BackboneId::EfficientNetB1, TrainableScope::All);
        let head_only = tiny(BackboneId::EfficientNetB1, TrainableScope::HeadOnly);
        assert_eq!(count_parameters(&all, CountScope::All), count_parameters(&head_only, CountScope::All));
        assert_eq!(count_parameters(&all, CountScope::Trainable), count_parameters(&all, CountScope::All));
        assert_eq!(
            count_parameters(&head_only, CountScope::Trainable),
            head_only.head_params().parameter_count()
        );
        assert!(count_parameters(&head_only, CountScope::All) > count_parameters(&head_only, CountScope::Trainable));
        assert!(!head_only.store().is_trainable());
        assert!(all.store().is_trainable());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = tiny(BackboneId::ResNet50, TrainableScope::HeadOnly);
        let b = tiny(BackboneId::ResNet50, TrainableScope::HeadOnly);
        assert_eq!(a.head_params(), b.head_params());
        let x = input(1, 64);
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
    }

    #[test]
    fn calibration_normalizes_final_features() {
        let mut model = tiny(BackboneId::EfficientNetB1, TrainableScope::HeadOnly);
        let x = (input(8, 64) * 3.0).unwrap();
        let spread = |m: &ModelHandle| {
            let f = tensor_to_array4(&m.backbone_features(&x, false).unwrap()).unwrap();
            f.std(0.0)
        };
        let before = spread(&model);
        assert_eq!(model.calibrate_batch_norm([x.narrow(0, 0, 4).unwrap(), x.narrow(0, 4, 4).unwrap()]).unwrap(), 2);
        let after = spread(&model);
        assert!(after > 100.0 * before, "{before} -> {after}");
        assert!(after > 0.05 && after < 20.0, "{after}");
        // the override is cleared afterwards
        assert_eq!(model.store().bn_control().momentum_or(0.01), 0.01);
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let model = tiny(BackboneId::ResNet50, TrainableScope::HeadOnly);
        assert!(matches!(model.forward(&input(1, 96)), Err(Error::Shape(_))));
    }

    #[test]
    fn too_small_input_and_bad_kernel_grid_are_config_errors() {
        let spec = BackboneSpec::new(BackboneId::ResNet50, (16, 16), WeightInit::Random);
        assert!(matches!(
            build_model(spec, HeadSpec::default(), TrainableScope::All, &BuildOptions::default()),
            Err(Error::Config(_))
        ));
        // 512 input -> 16x16 map -> 8x8 after 2x2 pooling, not 4x4
        let spec = BackboneSpec::new(BackboneId::ResNet50, (512, 512), WeightInit::Random);
        let head = HeadSpec { pooling: head::PoolingMode::Kernel2x2, ..Default::default() };
        assert!(matches!(
            build_model(spec, head, TrainableScope::All, &BuildOptions::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn batch_tensor_is_channel_first() {
        let mut a = Array3::<f32>::zeros((2, 2, 3));
        a[[1, 0, 2]] = 7.0;
        let img = PixelTensor::new(a, ValueRange::BackboneNormalized).unwrap();
        let t = batch_tensor(&[img]).unwrap();
        assert_eq!(t.dims(), &[1, 3, 2, 2]);
        let v: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
        // channel 2, row 1, col 0
        assert_eq!(v[2 * 4 + 2], 7.0);
    }
}

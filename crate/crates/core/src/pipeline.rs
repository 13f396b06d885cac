//! From labeled image sources to backbone input batches and pooled head
//! features.

use std::collections::HashMap;
use std::path::PathBuf;

use ndarray::Array2;
use rayon::prelude::*;

use crate::augment::{normalize_for_backbone, resize, AugmentDraw, PixelTensor, ValueRange};
use crate::dataset::{ClassLabel, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::model::{batch_tensor, ModelHandle};

/// Indexed labeled images; `load` returns raw 0-255 pixels.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;
    fn label(&self, index: usize) -> ClassLabel;
    fn load(&self, index: usize) -> Result<PixelTensor>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn labels(&self) -> Vec<ClassLabel> {
        (0..self.len()).map(|i| self.label(i)).collect()
    }
}

/// Images read from disk on demand.
#[derive(Debug, Clone, Default)]
pub struct FileSource {
    pub items: Vec<(PathBuf, ClassLabel)>,
}

impl FileSource {
    pub fn from_manifest(manifest: &DatasetManifest, split: Split) -> Self {
        FileSource {
            items: manifest
                .split_records(split)
                .map(|r| (manifest.absolute_path(r), r.label))
                .collect(),
        }
    }
}

impl SampleSource for FileSource {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn label(&self, index: usize) -> ClassLabel {
        self.items[index].1
    }

    fn load(&self, index: usize) -> Result<PixelTensor> {
        PixelTensor::load(&self.items[index].0)
    }
}

/// Images already in memory.
#[derive(Debug, Clone, Default)]
pub struct MemorySource {
    pub items: Vec<(PixelTensor, ClassLabel)>,
}

impl SampleSource for MemorySource {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn label(&self, index: usize) -> ClassLabel {
        self.items[index].1
    }

    fn load(&self, index: usize) -> Result<PixelTensor> {
        let img = &self.items[index].0;
        if img.range() != ValueRange::Raw0To255 {
            return Err(Error::Precondition("in-memory samples must hold raw pixels".into()));
        }
        Ok(img.clone())
    }
}

/// Augment, resize to the model input, and normalize one raw image.
pub fn model_input(raw: &PixelTensor, draw: &AugmentDraw, model: &ModelHandle) -> Result<PixelTensor> {
    let spec = &model.backbone_spec;
    let img = draw.apply(raw);
    let img = resize(&img, spec.input_size.0, spec.input_size.1)?;
    normalize_for_backbone(&img, spec.id)
}

/// Load and prepare `indices` in parallel, keeping their order.
pub fn load_batch(
    source: &dyn SampleSource,
    indices: &[usize],
    draws: &[AugmentDraw],
    model: &ModelHandle,
) -> Result<candle_core::Tensor> {
    let images = indices
        .par_iter()
        .zip(draws.par_iter())
        .map(|(&i, draw)| model_input(&source.load(i)?, draw, model))
        .collect::<Result<Vec<_>>>()?;
    batch_tensor(&images)
}

type CacheKey = (usize, [u8; 9]);

/// Pooled features of a frozen backbone, keyed by sample and the dihedral
/// element applied to it. Entries past the byte budget are not stored.
pub struct FeatureCache {
    entries: HashMap<CacheKey, Vec<f64>>,
    bytes: usize,
    budget: usize,
    pub hits: usize,
    pub misses: usize,
}

impl FeatureCache {
    pub fn new(budget_bytes: usize) -> Self {
        FeatureCache {
            entries: HashMap::new(),
            bytes: 0,
            budget: budget_bytes,
            hits: 0,
            misses: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn bytes(&self) -> usize {
        self.bytes
    }

    /// Later insertions stop once `bytes()` reaches the budget; existing
    /// entries are kept.
    pub fn set_budget(&mut self, budget_bytes: usize) {
        self.budget = budget_bytes;
    }

    /// Pooled rows for `indices`; misses run through the backbone in
    /// chunks of `batch_size`.
    pub fn pooled(
        &mut self,
        model: &ModelHandle,
        source: &dyn SampleSource,
        indices: &[usize],
        draws: &[AugmentDraw],
        batch_size: usize,
    ) -> Result<Array2<f64>> {
        let keys: Vec<CacheKey> = indices.iter().zip(draws).map(|(&i, d)| (i, d.group_key())).collect();
        let mut missing: Vec<usize> = Vec::new();
        for (pos, key) in keys.iter().enumerate() {
            if !self.entries.contains_key(key) && !missing.iter().any(|&m| keys[m] == *key) {
                missing.push(pos);
            }
        }
        self.misses += missing.len();
        self.hits += indices.len() - missing.len();

        let mut fresh: HashMap<CacheKey, Vec<f64>> = HashMap::new();
        for chunk in missing.chunks(batch_size.max(1)) {
            let idx: Vec<usize> = chunk.iter().map(|&p| indices[p]).collect();
            let dr: Vec<AugmentDraw> = chunk.iter().map(|&p| draws[p]).collect();
            let pooled = model.pooled_features(&load_batch(source, &idx, &dr, model)?)?;
            for (row, &p) in pooled.rows().into_iter().zip(chunk) {
                fresh.insert(keys[p], row.to_vec());
            }
        }

        let width = model.head_params().input_width();
        let mut out = Array2::zeros((indices.len(), width));
        for (r, key) in keys.iter().enumerate() {
            let row = fresh.get(key).or_else(|| self.entries.get(key)).expect("computed above");
            out.row_mut(r).assign(&ndarray::ArrayView1::from(row.as_slice()));
        }
        for (key, row) in fresh {
            let size = row.len() * std::mem::size_of::<f64>();
            if self.bytes + size <= self.budget {
                self.bytes += size;
                self.entries.insert(key, row);
            }
        }
        Ok(out)
    }
}

/// Inference-mode pooled features for a whole source without augmentation.
pub fn pooled_features(
    model: &ModelHandle,
    source: &dyn SampleSource,
    batch_size: usize,
    cache: Option<&mut FeatureCache>,
) -> Result<Array2<f64>> {
    let indices: Vec<usize> = (0..source.len()).collect();
    let draws = vec![AugmentDraw::IDENTITY; indices.len()];
    match cache {
        Some(cache) => cache.pooled(model, source, &indices, &draws, batch_size),
        None => FeatureCache::new(0).pooled(model, source, &indices, &draws, batch_size),
    }
}

/// Calibrate batch norm on up to `max_images` samples spread evenly over
/// the source, without augmentation.
pub fn calibrate_batch_norm(model: &mut ModelHandle, source: &dyn SampleSource, max_images: usize, batch_size: usize) -> Result<usize> {
    let n = max_images.min(source.len());
    let indices: Vec<usize> = (0..n).map(|i| i * source.len() / n).collect();
    let batches = indices
        .chunks(batch_size.max(1))
        .map(|chunk| load_batch(source, chunk, &vec![AugmentDraw::IDENTITY; chunk.len()], model))
        .collect::<Result<Vec<_>>>()?;
    model.calibrate_batch_norm(batches)
}

//! The run configuration file: sectioned `key = value` text, every key
//! optional, unknown keys rejected.

use std::fs;
use std::path::{Path, PathBuf};

use mri_bench_core::augment::AugmentationSpec;
use mri_bench_core::dataset::Layout;
use mri_bench_core::model::head::{HeadSpec, PoolingMode};
use mri_bench_core::model::registry::BackboneId;
use mri_bench_core::model::{BackboneSpec, TrainableScope, WeightInit};
use mri_bench_core::train::TrainConfig;
use mri_bench_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub augment: AugmentationSpec,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub root: PathBuf,
    /// `pre_split` or `flat`.
    pub layout: String,
    /// Train fraction per class, used for flat layouts.
    pub split_ratio: f64,
    pub seed: u64,
    /// Where `prepare` writes the manifest and `train` reads it.
    pub manifest: PathBuf,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            root: PathBuf::from("data"),
            layout: Layout::PreSplit.as_str().to_owned(),
            split_ratio: 0.8,
            seed: 42,
            manifest: PathBuf::from("manifest.csv"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub backbone: String,
    pub scope: TrainableScope,
    /// Square input side in pixels.
    pub input_size: usize,
    pub pooling: PoolingMode,
    pub weights: WeightInit,
    pub dense_widths: Vec<usize>,
    pub dropout_rate: f64,
    /// Images used to calibrate batch-norm statistics of randomly
    /// initialised backbones before training; 0 disables it.
    pub calibration_images: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let head = HeadSpec::default();
        ModelSection {
            backbone: BackboneId::EfficientNetB1.key().to_owned(),
            scope: TrainableScope::All,
            input_size: 512,
            pooling: head.pooling,
            weights: WeightInit::ImagenetPretrained,
            dense_widths: head.dense_widths,
            dropout_rate: head.dropout_rate,
            calibration_images: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub run_root: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            run_root: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults) and applies `section.key=value`
    /// overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (key, value) in overrides {
            apply_override(&mut doc, key, value)?;
        }
        let config: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_owned()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.layout()?;
        if !(self.dataset.split_ratio > 0.0 && self.dataset.split_ratio < 1.0) {
            return Err(Error::Config(format!(
                "dataset.split_ratio must lie in (0, 1), got {}",
                self.dataset.split_ratio
            )));
        }
        self.backbone_spec()?.validate()?;
        self.head_spec().validate()?;
        self.augment.validate()?;
        self.train.validate()
    }

    pub fn layout(&self) -> Result<Layout> {
        self.dataset.layout.parse().map_err(Error::Config)
    }

    pub fn backbone_spec(&self) -> Result<BackboneSpec> {
        let id: BackboneId = self.model.backbone.parse()?;
        Ok(BackboneSpec::new(id, (self.model.input_size, self.model.input_size), self.model.weights))
    }

    pub fn head_spec(&self) -> HeadSpec {
        HeadSpec {
            pooling: self.model.pooling,
            dense_widths: self.model.dense_widths.clone(),
            dropout_rate: self.model.dropout_rate,
            ..Default::default()
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Splits `--section.key=value` arguments out of `args`; everything else is
/// returned untouched for the regular parser.
pub fn extract_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        let parsed = arg.strip_prefix("--").and_then(|a| a.split_once('=')).filter(|(k, _)| {
            let mut parts = k.split('.');
            matches!((parts.next(), parts.next(), parts.next()), (Some(s), Some(f), None) if !s.is_empty() && !f.is_empty())
        });
        match parsed {
            Some((k, v)) => overrides.push((k.to_owned(), v.to_owned())),
            None => rest.push(arg),
        }
    }
    (rest, overrides)
}

/// Values are read as TOML literals (`0.001`, `true`, `[64, 64]`) and fall
/// back to plain strings.
fn apply_override(doc: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let (section, field) = key
        .split_once('.')
        .ok_or_else(|| Error::Config(format!("override `{key}` must look like section.key")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
    let table = doc
        .entry(section.to_owned())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("`{section}` is not a section")))?;
    table.insert(field.to_owned(), value);
    Ok(())
}

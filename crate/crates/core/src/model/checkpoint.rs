//! Self-describing checkpoints: a safetensors container whose header
//! metadata records the backbone and head specs, plus a `key=value` sidecar
//! with training provenance.

use std::borrow::Cow;
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use ndarray::{Array1, Array2};
use safetensors::{Dtype, SafeTensors, View};

use super::head::{HeadSpec, PoolingMode};
use super::{build_model, BackboneId, BackboneSpec, BuildOptions, ModelHandle, TrainableScope, WeightInit};
use crate::error::{Error, Result};

const FORMAT: &str = "mri-bench-checkpoint/1";
const BACKBONE_PREFIX: &str = "backbone.";

/// Tensor data converted to little-endian bytes only when written.
enum Payload<'a> {
    F64(&'a [f64], Vec<usize>),
    F32(Vec<f32>, Vec<usize>),
}

impl View for &Payload<'_> {
    fn dtype(&self) -> Dtype {
        match self {
            Payload::F64(..) => Dtype::F64,
            Payload::F32(..) => Dtype::F32,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            Payload::F64(_, s) | Payload::F32(_, s) => s,
        }
    }

    fn data(&self) -> Cow<'_, [u8]> {
        match self {
            Payload::F64(v, _) => Cow::Owned(v.iter().flat_map(|x| x.to_le_bytes()).collect()),
            Payload::F32(v, _) => Cow::Owned(v.iter().flat_map(|x| x.to_le_bytes()).collect()),
        }
    }

    fn data_len(&self) -> usize {
        match self {
            Payload::F64(v, _) => v.len() * 8,
            Payload::F32(v, _) => v.len() * 4,
        }
    }
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Write `bytes` next to `path` and rename over it, so a failed write never
/// clobbers the previous file.
pub(crate) fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = temp_path(path);
    if let Err(e) = write(&tmp) {
        let _ = fs::remove_file(&tmp);
        return Err(e);
    }
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn dims(d: (usize, usize)) -> String {
    format!("{}x{}", d.0, d.1)
}

fn header(handle: &ModelHandle) -> HashMap<String, String> {
    let h = &handle.head_spec;
    let widths = h.dense_widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",");
    [
        ("format", FORMAT.to_string()),
        ("backbone", handle.backbone_spec.id.key().to_string()),
        ("input_size", dims(handle.backbone_spec.input_size)),
        ("feature_channels", handle.backbone_spec.feature_channels().to_string()),
        ("scope", handle.scope.as_str().to_string()),
        ("head.pooled_spatial", dims(h.pooled_spatial)),
        ("head.pooling", h.pooling.as_str().to_string()),
        ("head.dense_widths", widths),
        ("head.dropout_rate", h.dropout_rate.to_string()),
        ("head.num_classes", h.num_classes.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

pub fn save_checkpoint(handle: &ModelHandle, path: &Path) -> Result<()> {
    let mut payloads: Vec<(String, Payload)> = Vec::new();
    for (i, layer) in handle.head.layers.iter().enumerate() {
        payloads.push((
            format!("head.{i}.weight"),
            Payload::F64(layer.weight.as_slice().expect("standard layout"), layer.weight.shape().to_vec()),
        ));
        payloads.push((
            format!("head.{i}.bias"),
            Payload::F64(layer.bias.as_slice().expect("standard layout"), vec![layer.bias.len()]),
        ));
    }
    for (name, entry) in handle.store.entries() {
        let t = entry.var.as_tensor();
        payloads.push((
            format!("{BACKBONE_PREFIX}{name}"),
            Payload::F32(t.flatten_all()?.to_vec1()?, t.dims().to_vec()),
        ));
    }
    let meta = header(handle);
    write_atomic(path, |tmp| {
        safetensors::serialize_to_file(payloads.iter().map(|(n, p)| (n.as_str(), p)), Some(meta), tmp)
            .map_err(|e| Error::Io {
                path: tmp.to_path_buf(),
                source: std::io::Error::other(e.to_string()),
            })
    })
}

struct Parsed {
    backbone: BackboneSpec,
    head: HeadSpec,
    scope: TrainableScope,
}

fn parse_dims(s: &str) -> Option<(usize, usize)> {
    let (a, b) = s.split_once('x')?;
    Some((a.parse().ok()?, b.parse().ok()?))
}

fn parse_header(meta: &HashMap<String, String>, path: &Path) -> Result<Parsed> {
    let bad = |what: &str| Error::Schema {
        path: path.to_path_buf(),
        line: 0,
        message: format!("checkpoint header: missing or malformed `{what}`"),
    };
    let get = |k: &str| meta.get(k).map(String::as_str).ok_or_else(|| bad(k));
    if get("format")? != FORMAT {
        return Err(bad("format"));
    }
    let id: BackboneId = BackboneId::lookup(get("backbone")?)?;
    let input_size = parse_dims(get("input_size")?).ok_or_else(|| bad("input_size"))?;
    let scope = get("scope")?.parse().map_err(|_| bad("scope"))?;
    let dense_widths = get("head.dense_widths")?
        .split(',')
        .map(|w| w.parse().map_err(|_| bad("head.dense_widths")))
        .collect::<Result<Vec<usize>>>()?;
    let head = HeadSpec {
        pooled_spatial: parse_dims(get("head.pooled_spatial")?).ok_or_else(|| bad("head.pooled_spatial"))?,
        pooling: get("head.pooling")?.parse::<PoolingMode>().map_err(|_| bad("head.pooling"))?,
        dense_widths,
        dropout_rate: get("head.dropout_rate")?.parse().map_err(|_| bad("head.dropout_rate"))?,
        num_classes: get("head.num_classes")?.parse().map_err(|_| bad("head.num_classes"))?,
    };
    Ok(Parsed {
        backbone: BackboneSpec::new(id, input_size, WeightInit::Random),
        head,
        scope,
    })
}

fn mismatch(what: &str, expected: impl ToString, found: impl ToString) -> Error {
    Error::Incompatible {
        what: what.to_string(),
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

/// Check a checkpoint's specs against what the caller expects; the error
/// names the first mismatched dimension.
fn check_compatible(found: &Parsed, backbone: &BackboneSpec, head: &HeadSpec) -> Result<()> {
    if found.backbone.id != backbone.id {
        return Err(mismatch("backbone", backbone.id.key(), found.backbone.id.key()));
    }
    if found.backbone.input_size != backbone.input_size {
        return Err(mismatch("input size", dims(backbone.input_size), dims(found.backbone.input_size)));
    }
    if found.head.pooled_spatial != head.pooled_spatial {
        return Err(mismatch("pooled grid", dims(head.pooled_spatial), dims(found.head.pooled_spatial)));
    }
    if found.head.pooling != head.pooling {
        return Err(mismatch("pooling mode", head.pooling.as_str(), found.head.pooling.as_str()));
    }
    if found.head.dense_widths != head.dense_widths {
        return Err(mismatch(
            "dense widths",
            format!("{:?}", head.dense_widths),
            format!("{:?}", found.head.dense_widths),
        ));
    }
    if found.head.num_classes != head.num_classes {
        return Err(mismatch("number of classes", head.num_classes, found.head.num_classes));
    }
    Ok(())
}

fn read_f64(view: &safetensors::tensor::TensorView<'_>, name: &str, path: &Path) -> Result<Vec<f64>> {
    if view.dtype() != Dtype::F64 {
        return Err(mismatch(&format!("dtype of `{name}` in {}", path.display()), "F64", format!("{:?}", view.dtype())));
    }
    Ok(view
        .data()
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Load a checkpoint written by [`save_checkpoint`]. When `expected` is
/// given, the stored specs must agree with it.
pub fn load_checkpoint(path: &Path, expected: Option<(&BackboneSpec, &HeadSpec)>) -> Result<ModelHandle> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let schema = |message: String| Error::Schema {
        path: path.to_path_buf(),
        line: 0,
        message,
    };
    let (_, metadata) = SafeTensors::read_metadata(&bytes).map_err(|e| schema(e.to_string()))?;
    let meta = metadata
        .metadata()
        .clone()
        .ok_or_else(|| schema("checkpoint has no header metadata".into()))?;
    let parsed = parse_header(&meta, path)?;
    if let Some((backbone, head)) = expected {
        check_compatible(&parsed, backbone, head)?;
    }

    let tensors = SafeTensors::deserialize(&bytes).map_err(|e| schema(e.to_string()))?;
    let mut handle = build_model(
        parsed.backbone,
        parsed.head.clone(),
        parsed.scope,
        &BuildOptions::default(),
    )?;
    for (i, layer) in handle.head.layers.iter_mut().enumerate() {
        for (suffix, want) in [("weight", layer.weight.shape().to_vec()), ("bias", vec![layer.bias.len()])] {
            let name = format!("head.{i}.{suffix}");
            let view = tensors.tensor(&name).map_err(|_| mismatch(&format!("contents of {}", path.display()), &name, "nothing"))?;
            if view.shape() != want.as_slice() {
                return Err(mismatch(&format!("shape of `{name}`"), format!("{want:?}"), format!("{:?}", view.shape())));
            }
            let values = read_f64(&view, &name, path)?;
            if suffix == "weight" {
                layer.weight = Array2::from_shape_vec((want[0], want[1]), values).map_err(|e| Error::Shape(e.to_string()))?;
            } else {
                layer.bias = Array1::from_vec(values);
            }
        }
    }
    let mut backbone = HashMap::new();
    for (name, view) in tensors.tensors() {
        if let Some(stripped) = name.strip_prefix(BACKBONE_PREFIX) {
            let t = Tensor::from_raw_buffer(view.data(), candle_core::DType::F32, view.shape(), &Device::Cpu)?;
            backbone.insert(stripped.to_string(), t);
        }
    }
    handle.store.load_from(&backbone, &path.display().to_string())?;
    Ok(handle)
}

/// Provenance written next to a checkpoint as `<checkpoint>.meta`.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub val_loss: f64,
    pub seed: u64,
    pub backbone: String,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
    name.push(".meta");
    checkpoint.with_file_name(name)
}

pub fn write_sidecar(checkpoint: &Path, meta: &CheckpointMeta) -> Result<()> {
    // f64 Display is the shortest string that parses back to the same value
    let text = format!(
        "epoch={}\nval_loss={}\nseed={}\nbackbone={}\n",
        meta.epoch, meta.val_loss, meta.seed, meta.backbone
    );
    let path = sidecar_path(checkpoint);
    write_atomic(&path, |tmp| fs::write(tmp, text).map_err(|e| Error::io(tmp, e)))
}

pub fn read_sidecar(checkpoint: &Path) -> Result<CheckpointMeta> {
    let path = sidecar_path(checkpoint);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut map = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.clone(),
            line: (n + 1) as u64,
            message: "expected key=value".into(),
        })?;
        map.insert(k.trim().to_string(), (n + 1, v.trim().to_string()));
    }
    fn field<T: std::str::FromStr>(map: &HashMap<String, (usize, String)>, key: &str, path: &Path) -> Result<T> {
        let (line, v) = map.get(key).ok_or_else(|| Error::Schema {
            path: path.to_path_buf(),
            line: 0,
            message: format!("missing `{key}`"),
        })?;
        v.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: *line as u64,
            message: format!("malformed `{key}`"),
        })
    }
    Ok(CheckpointMeta {
        epoch: field(&map, "epoch", &path)?,
        val_loss: field(&map, "val_loss", &path)?,
        seed: field(&map, "seed", &path)?,
        backbone: field(&map, "backbone", &path)?,
    })
}

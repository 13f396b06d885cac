//! Image preprocessing (decode, resize, normalization) and the stochastic
//! dihedral augmentation applied to training images.

mod transform;

use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use transform::{transform_by_name, TransformOp};

use crate::error::{Error, Result};
use crate::model::registry::BackboneId;
use crate::seed::{rng_for_indexed, role};

/// Value range of a [`PixelTensor`]. Transitions only move forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ValueRange {
    Raw0To255,
    Unit0To1,
    BackboneNormalized,
}

/// An `H x W x 3` image.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelTensor {
    data: Array3<f32>,
    range: ValueRange,
}

impl PixelTensor {
    pub fn new(data: Array3<f32>, range: ValueRange) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 || c != 3 {
            return Err(Error::Shape(format!(
                "pixel tensor must be HxWx3 with H, W > 0, got {h}x{w}x{c}"
            )));
        }
        Ok(PixelTensor {
            data: data.as_standard_layout().into_owned(),
            range,
        })
    }

    /// Grayscale images are replicated to three channels.
    pub fn from_image(img: &image::DynamicImage) -> Self {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            rgb.get_pixel(x as u32, y as u32)[c] as f32
        });
        PixelTensor {
            data,
            range: ValueRange::Raw0To255,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?
            .decode()
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?;
        Ok(Self::from_image(&img))
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub(crate) fn with_data(&self, data: Array3<f32>) -> Self {
        PixelTensor {
            data: data.as_standard_layout().into_owned(),
            range: self.range,
        }
    }
}

/// Bilinear resize with half-pixel centers and edge clamping. The aspect
/// ratio is not preserved.
pub fn resize(image: &PixelTensor, target_h: usize, target_w: usize) -> Result<PixelTensor> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::Argument(format!(
            "resize target must be positive, got {target_h}x{target_w}"
        )));
    }
    let (h, w, _) = image.data.dim();
    if (h, w) == (target_h, target_w) {
        return Ok(image.clone());
    }
    let rows = axis_taps(h, target_h);
    let cols = axis_taps(w, target_w);
    let src = &image.data;
    let out = Array3::from_shape_fn((target_h, target_w, 3), |(y, x, c)| {
        let (y0, y1, fy) = rows[y];
        let (x0, x1, fx) = cols[x];
        let top = src[[y0, x0, c]] * (1.0 - fx) + src[[y0, x1, c]] * fx;
        let bottom = src[[y1, x0, c]] * (1.0 - fx) + src[[y1, x1, c]] * fx;
        top * (1.0 - fy) + bottom * fy
    });
    Ok(image.with_data(out))
}

fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, (pos - lo as f64) as f32)
        })
        .collect()
}

/// Scale to `[0, 1]` then apply the backbone's published per-channel
/// mean/std normalization.
pub fn normalize_for_backbone(image: &PixelTensor, backbone: BackboneId) -> Result<PixelTensor> {
    if image.range != ValueRange::Raw0To255 {
        return Err(Error::Precondition(format!(
            "normalization expects raw 0-255 pixels, got {:?}",
            image.range
        )));
    }
    let info = backbone.info();
    let mut data = image.data.clone();
    for c in 0..3 {
        let (mean, std) = (info.mean[c], info.std[c]);
        data.index_axis_mut(ndarray::Axis(2), c)
            .mapv_inplace(|v| (v / 255.0 - mean) / std);
    }
    Ok(PixelTensor {
        data,
        range: ValueRange::BackboneNormalized,
    })
}

/// Declarative description of the random dihedral augmentation.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    pub enabled: bool,
    /// Candidate counterclockwise rotations in degrees, drawn uniformly.
    pub rotations: Vec<u16>,
    pub hflip: bool,
    pub vflip: bool,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            enabled: true,
            rotations: vec![0, 90, 180, 270],
            hflip: true,
            vflip: true,
        }
    }
}

impl AugmentationSpec {
    pub fn disabled() -> Self {
        AugmentationSpec {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        if self.rotations.is_empty() || !self.rotations.contains(&0) {
            return Err(Error::Config(
                "augment.rotations must be non-empty and contain 0".into(),
            ));
        }
        if let Some(bad) = self.rotations.iter().find(|r| ![0, 90, 180, 270].contains(*r)) {
            return Err(Error::Config(format!(
                "augment.rotations entry {bad} is not a multiple of 90 in [0, 270]"
            )));
        }
        Ok(())
    }

    /// Whether any drawable transform swaps height and width.
    pub fn swaps_axes(&self) -> bool {
        self.enabled && self.rotations.iter().any(|r| r % 180 == 90)
    }
}

/// One concrete outcome of the augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct AugmentDraw {
    pub rotation: u16,
    pub hflip: bool,
    pub vflip: bool,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        rotation: 0,
        hflip: false,
        vflip: false,
    };

    pub fn ops(&self) -> Vec<TransformOp> {
        let mut ops = Vec::with_capacity(3);
        match self.rotation {
            90 => ops.push(TransformOp::Rot90),
            180 => ops.push(TransformOp::Rot180),
            270 => ops.push(TransformOp::Rot270),
            _ => {}
        }
        if self.hflip {
            ops.push(TransformOp::HFlip);
        }
        if self.vflip {
            ops.push(TransformOp::VFlip);
        }
        ops
    }

    pub fn apply(&self, image: &PixelTensor) -> PixelTensor {
        self.ops()
            .into_iter()
            .fold(image.clone(), |img, op| transform_by_name(&img, op))
    }

    /// Identifies the dihedral group element this draw realizes; distinct
    /// draws with equal keys produce identical images (e.g. rot180 and
    /// hflip+vflip).
    pub fn group_key(&self) -> [u8; 9] {
        let probe = Array3::from_shape_fn((3, 3, 3), |(y, x, _)| (y * 3 + x) as f32);
        let probe = PixelTensor {
            data: probe,
            range: ValueRange::Raw0To255,
        };
        let out = self.apply(&probe);
        let mut key = [0u8; 9];
        for (k, v) in out.data.index_axis(ndarray::Axis(2), 0).iter().enumerate() {
            key[k] = *v as u8;
        }
        key
    }
}

/// Draw rotation, then horizontal flip, then vertical flip.
pub fn draw_augmentation<R: Rng + ?Sized>(spec: &AugmentationSpec, rng: &mut R) -> AugmentDraw {
    if !spec.enabled {
        return AugmentDraw::IDENTITY;
    }
    let rotation = spec.rotations[rng.random_range(0..spec.rotations.len())];
    let hflip = spec.hflip && rng.random_bool(0.5);
    let vflip = spec.vflip && rng.random_bool(0.5);
    AugmentDraw {
        rotation,
        hflip,
        vflip,
    }
}

pub fn apply_augmentation<R: Rng + ?Sized>(
    image: &PixelTensor,
    spec: &AugmentationSpec,
    rng: &mut R,
) -> PixelTensor {
    if !spec.enabled {
        return image.clone();
    }
    draw_augmentation(spec, rng).apply(image)
}

/// Generator for one sample in one epoch, independent of worker layout.
pub fn sample_rng(seed: u64, epoch: usize, record_index: usize) -> ChaCha8Rng {
    rng_for_indexed(seed, role::AUGMENT, &[epoch as u64, record_index as u64])
}

#[cfg(test)]
pub(crate) fn all_finite(image: &PixelTensor) -> bool {
    image.data.iter().all(|v| v.is_finite())
}

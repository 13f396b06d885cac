//! Synthetic T1-like brain phantoms for smoke runs when the real scans are
//! unavailable. Each class has a distinct bright-lesion signature:
//! glioma a large ring-enhancing intra-axial mass, meningioma a bright
//! homogeneous mass abutting the skull, pituitary a small midline lesion,
//! notumor none.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};
use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::{PixelTensor, ValueRange};
use crate::dataset::{ClassLabel, Layout};
use crate::error::{Error, Result};
use crate::pipeline::MemorySource;
use crate::seed::rng_for_indexed;

const ROLE: &str = "synthetic";

struct Blob {
    cy: f32,
    cx: f32,
    radius: f32,
    intensity: f32,
    /// Fraction of the radius that is a dark core (ring enhancement).
    core: f32,
}

impl Blob {
    fn value(&self, y: f32, x: f32) -> f32 {
        let r = ((y - self.cy).powi(2) + (x - self.cx).powi(2)).sqrt() / self.radius;
        if r >= 1.0 {
            0.0
        } else if r < self.core {
            -0.4 * self.intensity
        } else {
            self.intensity * (1.0 - r * r).sqrt().max(0.5)
        }
    }
}

/// Grayscale phantom in `[0, 255]`, `size x size`.
pub fn phantom(label: ClassLabel, size: usize, rng: &mut ChaCha8Rng) -> GrayImage {
    let s = size as f32;
    let c = s / 2.0;
    let ry = s * rng.random_range(0.38..0.45);
    let rx = s * rng.random_range(0.32..0.40);
    let tissue = rng.random_range(70.0..100.0);
    let ang: f32 = rng.random_range(0.0..std::f32::consts::TAU);

    let mut blobs = Vec::new();
    match label {
        ClassLabel::Glioma => {
            // large intra-axial mass with a necrotic core
            let radius = s * rng.random_range(0.15..0.2);
            let r = rng.random_range(0.2..0.4);
            blobs.push(Blob {
                cy: c + ang.sin() * ry * r,
                cx: c + ang.cos() * rx * r,
                radius,
                intensity: rng.random_range(90.0..120.0),
                core: rng.random_range(0.45..0.6),
            });
        }
        ClassLabel::Meningioma => {
            // homogeneous, very bright, against the skull
            let radius = s * rng.random_range(0.1..0.13);
            blobs.push(Blob {
                cy: c + ang.sin() * (ry - radius * 0.5),
                cx: c + ang.cos() * (rx - radius * 0.5),
                radius,
                intensity: rng.random_range(150.0..180.0),
                core: 0.0,
            });
        }
        ClassLabel::Pituitary => {
            // small midline lesion below the ventricles
            blobs.push(Blob {
                cy: c + s * rng.random_range(0.06..0.1),
                cx: c + s * rng.random_range(-0.015..0.015),
                radius: s * rng.random_range(0.045..0.065),
                intensity: rng.random_range(140.0..170.0),
                core: 0.0,
            });
        }
        ClassLabel::NoTumor => {}
    }

    let noise = 8.0f32;
    let mut img = GrayImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f32 + 0.5, x as f32 + 0.5);
            let d = ((fy - c) / ry).powi(2) + ((fx - c) / rx).powi(2);
            let mut v = if d <= 1.0 {
                // bright rim for the skull, darker ventricles near the center
                let rim = if d > 0.85 { 60.0 } else { 0.0 };
                let ventricle = if d < 0.02 { -40.0 } else { 0.0 };
                tissue + rim + ventricle
            } else {
                0.0
            };
            for b in &blobs {
                v += b.value(fy, fx);
            }
            if d <= 1.0 {
                v += rng.random_range(-noise..noise);
            }
            img.put_pixel(x as u32, y as u32, Luma([v.clamp(0.0, 255.0) as u8]));
        }
    }
    img
}

fn to_pixels(img: &GrayImage) -> PixelTensor {
    let (w, h) = img.dimensions();
    let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, _)| img.get_pixel(x as u32, y as u32)[0] as f32);
    PixelTensor::new(data, ValueRange::Raw0To255).expect("three channels")
}

/// `per_class` phantoms of each class, interleaved glioma, meningioma, ...
pub fn phantom_source(per_class: usize, size: usize, seed: u64) -> MemorySource {
    let items = (0..per_class * ClassLabel::COUNT)
        .into_par_iter()
        .map(|i| {
            let label = ClassLabel::ALL[i % ClassLabel::COUNT];
            let mut rng = rng_for_indexed(seed, ROLE, &[i as u64]);
            (to_pixels(&phantom(label, size, &mut rng)), label)
        })
        .collect();
    MemorySource { items }
}

/// Per-class `(train, val)` counts to write; for the flat layout only the
/// sum is used.
pub type ClassCounts = [(usize, usize); 4];

/// Write a phantom dataset in either directory layout. Files are named
/// `{class}_{n:05}.png`.
pub fn write_phantom_dataset(root: &Path, layout: Layout, counts: &ClassCounts, size: usize, seed: u64) -> Result<usize> {
    if size == 0 {
        return Err(Error::Argument("phantom size must be positive".into()));
    }
    let mut jobs = Vec::new();
    for (class, &(train, val)) in ClassLabel::ALL.iter().zip(counts) {
        let dirs: Vec<(std::path::PathBuf, usize)> = match layout {
            Layout::PreSplit => vec![
                (root.join("Training").join(class.as_str()), train),
                (root.join("Testing").join(class.as_str()), val),
            ],
            Layout::Flat => vec![(root.join(class.as_str()), train + val)],
        };
        let mut n = 0;
        for (dir, count) in dirs {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for _ in 0..count {
                jobs.push((*class, dir.join(format!("{class}_{n:05}.png")), n));
                n += 1;
            }
        }
    }
    jobs.par_iter().try_for_each(|(class, path, n)| {
        let mut rng = rng_for_indexed(seed, ROLE, &[class.index() as u64, *n as u64]);
        phantom(*class, size, &mut rng).save(path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })
    })?;
    Ok(jobs.len())
}

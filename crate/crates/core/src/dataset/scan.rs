use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;

use super::{relative_to, ClassLabel, DatasetManifest, ImageDims, ImageRecord, Layout, Split};
use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];
const TRAIN_DIR: &str = "Training";
const TEST_DIR: &str = "Testing";

/// Walk a class-structured dataset directory and probe every image.
///
/// Probing runs in parallel, but candidates are sorted by path first, so the
/// manifest is identical to a sequential scan.
pub fn scan_dataset(root: &Path, layout: Layout) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Config(format!(
            "dataset root {} does not exist or is not a directory",
            root.display()
        )));
    }
    let groups: Vec<(PathBuf, Split)> = match layout {
        Layout::Flat => vec![(root.to_path_buf(), Split::Unassigned)],
        Layout::PreSplit => {
            check_top_level(root)?;
            vec![
                (root.join(TRAIN_DIR), Split::Train),
                (root.join(TEST_DIR), Split::Val),
            ]
        }
    };

    let mut candidates: Vec<(PathBuf, ClassLabel, Split)> = Vec::new();
    let mut class_seen = [0usize; ClassLabel::COUNT];
    for (dir, split) in &groups {
        for class in class_dirs(dir)? {
            let class_dir = dir.join(class.as_str());
            for entry in read_dir_sorted(&class_dir)? {
                if entry.is_file() && !is_hidden(&entry) {
                    candidates.push((entry, class, *split));
                    class_seen[class.index()] += 1;
                }
            }
        }
    }
    candidates.sort_by(|a, b| a.0.cmp(&b.0));

    let probed: Vec<(PathBuf, ClassLabel, Split, Option<ImageDims>)> = candidates
        .into_par_iter()
        .map(|(path, label, split)| {
            let dims = probe_image(&path);
            (path, label, split, dims)
        })
        .collect();

    let mut manifest = DatasetManifest::empty(root, layout);
    for (path, label, split, dims) in probed {
        match dims {
            Some(dims) => manifest.records.push(ImageRecord {
                path: relative_to(root, &path),
                label,
                split,
                dims: Some(dims),
            }),
            None => manifest.skipped.push(relative_to(root, &path)),
        }
    }
    for class in ClassLabel::ALL {
        if manifest.class_total(class) == 0 {
            manifest.empty_classes.push(class);
        }
    }
    if !manifest.skipped.is_empty() {
        warn!(
            "skipped {} undecodable file(s) under {}",
            manifest.skipped.len(),
            root.display()
        );
    }
    for class in &manifest.empty_classes {
        warn!("class `{class}` has no images under {}", root.display());
    }
    Ok(manifest)
}

fn check_top_level(root: &Path) -> Result<()> {
    for required in [TRAIN_DIR, TEST_DIR] {
        if !root.join(required).is_dir() {
            return Err(Error::Config(format!(
                "pre_split layout requires directory {}",
                root.join(required).display()
            )));
        }
    }
    for entry in read_dir_sorted(root)? {
        if entry.is_dir() && !is_hidden(&entry) {
            let name = file_name(&entry);
            if name != TRAIN_DIR && name != TEST_DIR {
                return Err(Error::Config(format!(
                    "unexpected directory {} in pre_split layout (expected {TRAIN_DIR}/ and {TEST_DIR}/)",
                    entry.display()
                )));
            }
        }
    }
    Ok(())
}

/// Every class directory must exist and no other directory may appear.
fn class_dirs(dir: &Path) -> Result<Vec<ClassLabel>> {
    for entry in read_dir_sorted(dir)? {
        if entry.is_dir() && !is_hidden(&entry) && file_name(&entry).parse::<ClassLabel>().is_err() {
            return Err(Error::Config(format!(
                "unknown class directory {} (expected one of glioma, meningioma, pituitary, notumor)",
                entry.display()
            )));
        }
    }
    for class in ClassLabel::ALL {
        let path = dir.join(class.as_str());
        if !path.is_dir() {
            return Err(Error::Config(format!(
                "missing class directory {}",
                path.display()
            )));
        }
    }
    Ok(ClassLabel::ALL.to_vec())
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn is_hidden(path: &Path) -> bool {
    file_name(path).starts_with('.')
}

fn probe_image(path: &Path) -> Option<ImageDims> {
    let ext = path.extension()?.to_string_lossy().to_ascii_lowercase();
    if !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
        return None;
    }
    let (width, height) = image::ImageReader::open(path)
        .ok()?
        .with_guessed_format()
        .ok()?
        .into_dimensions()
        .ok()?;
    (width > 0 && height > 0).then_some(ImageDims { width, height })
}

//! Labeled MRI image records, their train/validation assignment, and the
//! persisted manifest that every run is driven from.

mod io;
mod scan;
mod split;
mod verify;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub use io::{load_manifest, save_manifest};
pub use scan::scan_dataset;
pub use split::{stratified_split, train_count};
pub use verify::{verify_counts, ClassCountCheck, ExpectedCounts, VerificationReport};

/// The four diagnostic classes. The declaration order is the one-hot order
/// used everywhere in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClassLabel {
    Glioma,
    Meningioma,
    Pituitary,
    NoTumor,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 4] = [
        ClassLabel::Glioma,
        ClassLabel::Meningioma,
        ClassLabel::Pituitary,
        ClassLabel::NoTumor,
    ];
    pub const COUNT: usize = 4;

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Glioma => "glioma",
            ClassLabel::Meningioma => "meningioma",
            ClassLabel::Pituitary => "pituitary",
            ClassLabel::NoTumor => "notumor",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<ClassLabel> {
        Self::ALL.get(index).copied()
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown class label `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// `root/Training/<class>/*` and `root/Testing/<class>/*`.
    PreSplit,
    /// `root/<class>/*`, splits left unassigned.
    Flat,
}

impl Layout {
    pub fn as_str(self) -> &'static str {
        match self {
            Layout::PreSplit => "pre_split",
            Layout::Flat => "flat",
        }
    }
}

impl FromStr for Layout {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pre_split" => Ok(Layout::PreSplit),
            "flat" => Ok(Layout::Flat),
            other => Err(format!("unknown layout `{other}` (expected pre_split or flat)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    /// Relative to the manifest root.
    pub path: PathBuf,
    pub label: ClassLabel,
    pub split: Split,
    /// Probed at scan time; not persisted in the manifest file.
    pub dims: Option<ImageDims>,
}

/// Immutable after construction; operations return new manifests.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
    pub class_names: Vec<String>,
    pub root: PathBuf,
    pub layout: Layout,
    pub seed: u64,
    /// `None` when the splits were adopted from a pre-split layout.
    pub split_ratio: Option<f64>,
    /// Files that were found but could not be probed as images.
    pub skipped: Vec<PathBuf>,
    /// Class directories that contained no images.
    pub empty_classes: Vec<ClassLabel>,
}

impl DatasetManifest {
    pub fn canonical_class_names() -> Vec<String> {
        ClassLabel::ALL.iter().map(|c| c.as_str().to_owned()).collect()
    }

    pub fn empty(root: impl Into<PathBuf>, layout: Layout) -> Self {
        DatasetManifest {
            records: Vec::new(),
            class_names: Self::canonical_class_names(),
            root: root.into(),
            layout,
            seed: 0,
            split_ratio: None,
            skipped: Vec::new(),
            empty_classes: Vec::new(),
        }
    }

    pub fn absolute_path(&self, record: &ImageRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn class_total(&self, class: ClassLabel) -> usize {
        self.records.iter().filter(|r| r.label == class).count()
    }

    pub fn class_split_count(&self, class: ClassLabel, split: Split) -> usize {
        self.records
            .iter()
            .filter(|r| r.label == class && r.split == split)
            .count()
    }

    pub fn is_unassigned(&self) -> bool {
        self.records.iter().all(|r| r.split == Split::Unassigned)
    }

    pub fn warning_count(&self) -> usize {
        self.skipped.len() + self.empty_classes.len()
    }

    /// Keep at most `per_class` records per (class, split), in manifest order.
    pub fn subset_per_class(&self, per_class: usize) -> DatasetManifest {
        let mut counts = std::collections::HashMap::new();
        let records = self
            .records
            .iter()
            .filter(|r| {
                let n = counts.entry((r.label, r.split)).or_insert(0usize);
                *n += 1;
                *n <= per_class
            })
            .cloned()
            .collect();
        DatasetManifest {
            records,
            ..self.clone()
        }
    }

    /// Records relabeled as unassigned, for an explicit re-split.
    pub fn reset_splits(&self) -> DatasetManifest {
        let mut out = self.clone();
        for r in &mut out.records {
            r.split = Split::Unassigned;
        }
        out.split_ratio = None;
        out
    }
}

pub(crate) fn relative_to(root: &Path, path: &Path) -> PathBuf {
    path.strip_prefix(root).unwrap_or(path).to_path_buf()
}

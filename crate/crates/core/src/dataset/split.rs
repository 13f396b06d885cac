use rand::seq::SliceRandom;

use super::{ClassLabel, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::seed::{rng_for, role};

/// Number of training records for a class of `n` records: `floor(ratio * n)`.
///
/// A tiny tolerance absorbs binary representation error, so 0.29 * 100 is 29.
pub fn train_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64 + 1e-9).floor() as usize
}

/// Per-class seeded split of an unassigned manifest.
///
/// Within each class the records are ordered by path before shuffling, so the
/// assignment depends only on the seed and the set of paths. A manifest that
/// already carries splits is rejected unless `reset` is set.
pub fn stratified_split(
    manifest: &DatasetManifest,
    ratio: f64,
    seed: u64,
    reset: bool,
) -> Result<DatasetManifest> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Argument(format!(
            "split ratio must lie in (0, 1), got {ratio}"
        )));
    }
    let mut out = if manifest.is_unassigned() {
        manifest.clone()
    } else if reset {
        manifest.reset_splits()
    } else {
        return Err(Error::Precondition(
            "manifest already has split assignments; pass reset to re-split".into(),
        ));
    };

    for class in ClassLabel::ALL {
        let mut members: Vec<usize> = out
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label == class)
            .map(|(i, _)| i)
            .collect();
        members.sort_by(|&a, &b| out.records[a].path.cmp(&out.records[b].path));
        let mut rng = rng_for(seed, &format!("{}/{}", role::SPLIT, class.as_str()));
        members.shuffle(&mut rng);
        let n_train = train_count(ratio, members.len());
        for (rank, &idx) in members.iter().enumerate() {
            out.records[idx].split = if rank < n_train { Split::Train } else { Split::Val };
        }
    }
    out.seed = seed;
    out.split_ratio = Some(ratio);
    Ok(out)
}

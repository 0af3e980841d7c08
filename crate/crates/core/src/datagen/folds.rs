//! Video-level k-fold splitting.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_id: usize,
    pub train_videos: BTreeSet<String>,
    pub val_videos: BTreeSet<String>,
}

/// Shuffles the videos with `seed` and deals them round-robin into
/// `n_folds` validation groups; each fold trains on the remaining groups.
pub fn make_fold_splits(
    manifest: &DatasetManifest,
    n_folds: usize,
    seed: u64,
) -> Result<Vec<FoldSplit>> {
    let mut videos = manifest.videos();
    if n_folds < 2 {
        return Err(Error::validation("n_folds", "need at least 2 folds"));
    }
    if videos.len() < n_folds {
        return Err(Error::validation(
            "n_folds",
            format!("{} videos cannot fill {n_folds} folds", videos.len()),
        ));
    }
    videos.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut groups = vec![BTreeSet::new(); n_folds];
    for (i, v) in videos.iter().enumerate() {
        groups[i % n_folds].insert(v.clone());
    }
    Ok((0..n_folds)
        .map(|k| FoldSplit {
            fold_id: k,
            val_videos: groups[k].clone(),
            train_videos: groups
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != k)
                .flat_map(|(_, g)| g.iter().cloned())
                .collect(),
        })
        .collect())
}

pub fn save_folds(folds: &[FoldSplit], path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(folds).expect("serializable");
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_folds(path: &Path) -> Result<Vec<FoldSplit>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.line(), e.to_string()))
}

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::{DatasetManifest, Label, Origin, Sample, Split};
use crate::error::{LeafError, Result};

/// Train / validation / test proportions, in percent.
pub const SPLIT_FRACTIONS: [usize; 3] = [70, 15, 15];

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

/// Per-class `[train, val, test]` counts.
///
/// Validation and test each receive `ceil(15% · N)` samples overall. Each
/// class first gets the floor of its proportional quota; the leftover slots
/// go to the largest fractional remainders, ties broken by the larger
/// remaining pool and then the lower class index. Train keeps the rest.
pub fn allocate_split(class_counts: &[usize]) -> Vec<[usize; 3]> {
    let total: usize = class_counts.iter().sum();
    let mut remaining = class_counts.to_vec();
    let mut out = vec![[0usize; 3]; class_counts.len()];
    for slot in 1..3 {
        let pct = SPLIT_FRACTIONS[slot];
        let target = (pct * total).div_ceil(100);
        let mut take: Vec<usize> =
            class_counts.iter().zip(&remaining).map(|(&n, &r)| (pct * n / 100).min(r)).collect();
        let mut order: Vec<usize> = (0..class_counts.len()).collect();
        order.sort_by_key(|&k| (std::cmp::Reverse(pct * class_counts[k] % 100), std::cmp::Reverse(remaining[k]), k));
        let mut extra = target.saturating_sub(take.iter().sum());
        while extra > 0 {
            let before = extra;
            for &k in &order {
                if extra > 0 && take[k] < remaining[k] {
                    take[k] += 1;
                    extra -= 1;
                }
            }
            if extra == before {
                break;
            }
        }
        for (k, t) in take.into_iter().enumerate() {
            out[k][slot] = t;
            remaining[k] -= t;
        }
    }
    for (k, r) in remaining.into_iter().enumerate() {
        out[k][0] = r;
    }
    out
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Nearest ancestor directory named after a class.
fn class_of(relative: &Path) -> Option<Label> {
    relative.parent()?.components().rev().find_map(|c| c.as_os_str().to_str()?.parse().ok())
}

fn class_seed(seed: u64, label: Label) -> u64 {
    seed ^ (0xA076_1D64_78BD_642F_u64.wrapping_mul(label.index() as u64 + 1))
}

/// Scans `root` for class directories, skips undecodable files into
/// `manifest.skipped`, and shuffles each class with `seed` before allocating
/// it per [`allocate_split`].
pub fn load_and_split(root: &Path, seed: u64) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(LeafError::Config(format!("dataset root {} is not a directory", root.display())));
    }
    let root = fs::canonicalize(root).map_err(|e| LeafError::io(root, e))?;
    let mut class_dirs = BTreeSet::new();
    let mut per_class: [Vec<PathBuf>; 3] = Default::default();
    let mut skipped = Vec::new();
    for entry in WalkDir::new(&root).follow_links(true).sort_by_file_name() {
        let entry = entry.map_err(|e| LeafError::Dataset(format!("walking {}: {e}", root.display())))?;
        let path = entry.path();
        if entry.file_type().is_dir() {
            if let Some(label) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.parse::<Label>().ok()) {
                class_dirs.insert(label);
            }
            continue;
        }
        if !is_image(path) {
            continue;
        }
        let relative = path.strip_prefix(&root).unwrap_or(path);
        let Some(label) = class_of(relative) else {
            skipped.push(SkippedFile { path: path.to_path_buf(), reason: "not inside a class directory".into() });
            continue;
        };
        match image::image_dimensions(path) {
            Ok((w, h)) if w > 0 && h > 0 => per_class[label.index()].push(path.to_path_buf()),
            Ok(_) => skipped.push(SkippedFile { path: path.to_path_buf(), reason: "zero-sized image".into() }),
            Err(e) => skipped.push(SkippedFile { path: path.to_path_buf(), reason: e.to_string() }),
        }
    }
    let missing: Vec<&str> = Label::ALL.iter().filter(|l| !class_dirs.contains(l)).map(|l| l.as_str()).collect();
    if !missing.is_empty() {
        return Err(LeafError::Dataset(format!(
            "no class directory for {} under {}",
            missing.join(", "),
            root.display()
        )));
    }
    for s in &skipped {
        log::warn!("skipping {}: {}", s.path.display(), s.reason);
    }

    let counts: Vec<usize> = per_class.iter().map(Vec::len).collect();
    let allocation = allocate_split(&counts);
    let mut records = Vec::with_capacity(counts.iter().sum());
    for label in Label::ALL {
        let mut paths = std::mem::take(&mut per_class[label.index()]);
        paths.shuffle(&mut ChaCha8Rng::seed_from_u64(class_seed(seed, label)));
        let [_, n_val, n_test] = allocation[label.index()];
        for (i, image_path) in paths.into_iter().enumerate() {
            let split = if i < n_val {
                Split::Val
            } else if i < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
            records.push(Sample { image_path, label, split, origin: Origin::Original, seed });
        }
    }
    records.sort_by(|a, b| (a.split, a.label, &a.image_path).cmp(&(b.split, b.label, &b.image_path)));
    let mut manifest = DatasetManifest::new(records, seed);
    manifest.skipped = skipped;
    Ok(manifest)
}

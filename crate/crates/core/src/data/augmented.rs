use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{sample_plan, sample_seed, AugmentationKind, DatasetManifest, ImageF32, Origin, Sample, Split};
use crate::error::{LeafError, Result};

/// Augmented copies written per original training image.
pub const VARIANTS_PER_SAMPLE: usize = 2;

/// Pixel statistics of the generated images of one set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetStatistics {
    pub kind: AugmentationKind,
    pub generated: usize,
    pub mean: f64,
    pub variance: f64,
}

struct Generated {
    records: Vec<Sample>,
    sum: f64,
    sum_sq: f64,
    values: usize,
}

/// Writes `VARIANTS_PER_SAMPLE` augmented PNGs per original training sample
/// under `out_dir/images/<class>/` at `resolution`, plus `out_dir/manifest.tsv`
/// and `out_dir/stats.json`. Validation and test records pass through.
pub fn build_augmented_set(
    manifest: &DatasetManifest,
    kind: AugmentationKind,
    seed: u64,
    out_dir: &Path,
    resolution: usize,
) -> Result<(DatasetManifest, SetStatistics)> {
    if manifest.records.iter().any(|s| s.origin != Origin::Original) {
        return Err(LeafError::Dataset("input manifest already contains augmented samples".into()));
    }
    let originals: Vec<&Sample> = manifest.split(Split::Train).collect();
    if originals.is_empty() {
        return Err(LeafError::Dataset("manifest has no training samples to augment".into()));
    }

    let mut names = HashSet::new();
    for s in &originals {
        if !names.insert((s.label, s.id())) {
            return Err(LeafError::io(
                &s.image_path,
                std::io::Error::new(std::io::ErrorKind::AlreadyExists, format!("output name '{}' collides", s.id())),
            ));
        }
    }
    for label in super::Label::ALL {
        let dir = out_dir.join("images").join(label.as_str());
        fs::create_dir_all(&dir).map_err(|e| LeafError::io(&dir, e))?;
    }
    let out_dir = fs::canonicalize(out_dir).map_err(|e| LeafError::io(out_dir, e))?;

    let generated: Vec<Generated> = originals
        .par_iter()
        .enumerate()
        .map(|(index, source)| {
            let img = ImageF32::load(&source.image_path, Some(resolution))?;
            let mut g = Generated { records: Vec::new(), sum: 0.0, sum_sq: 0.0, values: 0 };
            for variant in 0..VARIANTS_PER_SAMPLE {
                let stream = sample_seed(seed, kind, index as u64, variant as u64);
                let plan = sample_plan(kind, &mut ChaCha8Rng::seed_from_u64(stream));
                let out = plan.apply(&img)?;
                let path = out_dir
                    .join("images")
                    .join(source.label.as_str())
                    .join(format!("{}_{kind}{variant}.png", source.id()));
                out.save_png(&path)?;
                for v in out.to_rgb8().as_raw() {
                    let v = *v as f64 / 255.0;
                    g.sum += v;
                    g.sum_sq += v * v;
                }
                g.values += out.data().len();
                g.records.push(Sample {
                    image_path: path,
                    label: source.label,
                    split: Split::Train,
                    origin: Origin::Augmented { kind, source: source.id() },
                    seed: stream,
                });
            }
            Ok(g)
        })
        .collect::<Result<_>>()?;

    let (mut sum, mut sum_sq, mut values) = (0.0, 0.0, 0usize);
    let mut records: Vec<Sample> = originals.iter().map(|s| (*s).clone()).collect();
    for g in generated {
        sum += g.sum;
        sum_sq += g.sum_sq;
        values += g.values;
        records.extend(g.records);
    }
    records.extend(manifest.records.iter().filter(|s| s.split != Split::Train).cloned());
    let mean = sum / values as f64;
    let stats = SetStatistics {
        kind,
        generated: originals.len() * VARIANTS_PER_SAMPLE,
        mean,
        variance: (sum_sq / values as f64 - mean * mean).max(0.0),
    };
    log::info!(
        "{kind}: {} generated images, pixel mean {:.4}, variance {:.4}",
        stats.generated,
        stats.mean,
        stats.variance
    );

    let out = DatasetManifest::new(records, seed);
    out.write(&out_dir.join(super::MANIFEST_FILE))?;
    let stats_path = out_dir.join("stats.json");
    fs::write(&stats_path, serde_json::to_string_pretty(&stats)? + "\n").map_err(|e| LeafError::io(&stats_path, e))?;
    Ok((out, stats))
}

//! Dataset manifests, the stratified split, augmentations and batch loading.

mod augment;
mod augmented;
mod image;
mod loader;
mod split;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LeafError, Result};

pub use self::augment::{
    augment_brightness, augment_combination, augment_crop, augment_flip, augment_rotate, crop_resize,
    sample_plan, sample_seed, scale_brightness, AugmentOp, Axis, AugmentPlan, BRIGHTNESS_RANGE, CROP_RANGE,
    ROTATION_RANGE,
};
pub use self::augmented::{build_augmented_set, SetStatistics, VARIANTS_PER_SAMPLE};
pub use self::image::ImageF32;
pub use self::loader::{LoadedSplit, CACHE_ENV};
pub use self::split::{allocate_split, load_and_split, SkippedFile, SPLIT_FRACTIONS};

/// Leaf condition classes, in label-index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    AngularLeafSpot,
    BeanRust,
    Healthy,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::AngularLeafSpot, Label::BeanRust, Label::Healthy];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or(LeafError::Label { label: i, classes: Self::ALL.len() })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::AngularLeafSpot => "angular_leaf_spot",
            Label::BeanRust => "bean_rust",
            Label::Healthy => "healthy",
        }
    }
}

/// Class names in label-index order.
pub const CLASS_NAMES: [&str; 3] = ["angular_leaf_spot", "bean_rust", "healthy"];

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = LeafError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| LeafError::Dataset(format!("unknown class '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = LeafError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| LeafError::Dataset(format!("unknown split '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationKind {
    Brightness,
    Crop,
    Flip,
    Rotation,
    Combination,
}

impl AugmentationKind {
    pub const ALL: [AugmentationKind; 5] = [
        AugmentationKind::Brightness,
        AugmentationKind::Crop,
        AugmentationKind::Flip,
        AugmentationKind::Rotation,
        AugmentationKind::Combination,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AugmentationKind::Brightness => "brightness",
            AugmentationKind::Crop => "crop",
            AugmentationKind::Flip => "flip",
            AugmentationKind::Rotation => "rotation",
            AugmentationKind::Combination => "combination",
        }
    }
}

impl fmt::Display for AugmentationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AugmentationKind {
    type Err = LeafError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| LeafError::Config(format!("unknown augmentation '{s}'")))
    }
}

/// A training set: the plain split or one of the augmented variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingSet {
    Original,
    Augmented(AugmentationKind),
}

impl TrainingSet {
    pub const ALL: [TrainingSet; 6] = [
        TrainingSet::Original,
        TrainingSet::Augmented(AugmentationKind::Brightness),
        TrainingSet::Augmented(AugmentationKind::Crop),
        TrainingSet::Augmented(AugmentationKind::Flip),
        TrainingSet::Augmented(AugmentationKind::Rotation),
        TrainingSet::Augmented(AugmentationKind::Combination),
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainingSet::Original => "original",
            TrainingSet::Augmented(k) => k.as_str(),
        }
    }

    /// Manifest location below a data directory.
    pub fn manifest_path(self, data_dir: &Path) -> PathBuf {
        match self {
            TrainingSet::Original => data_dir.join(MANIFEST_FILE),
            TrainingSet::Augmented(k) => data_dir.join(k.as_str()).join(MANIFEST_FILE),
        }
    }
}

impl fmt::Display for TrainingSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainingSet {
    type Err = LeafError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "original" {
            return Ok(TrainingSet::Original);
        }
        s.parse().map(TrainingSet::Augmented)
    }
}

/// Where a sample came from. Augmented samples name their source by id.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    Original,
    Augmented { kind: AugmentationKind, source: String },
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Original => f.write_str("original"),
            Origin::Augmented { kind, source } => write!(f, "augmented:{kind}:{source}"),
        }
    }
}

impl FromStr for Origin {
    type Err = LeafError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "original" {
            return Ok(Origin::Original);
        }
        let mut parts = s.splitn(3, ':');
        match (parts.next(), parts.next(), parts.next()) {
            (Some("augmented"), Some(kind), Some(source)) if !source.is_empty() => {
                Ok(Origin::Augmented { kind: kind.parse()?, source: source.to_string() })
            }
            _ => Err(LeafError::Dataset(format!("malformed origin '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub image_path: PathBuf,
    pub label: Label,
    pub split: Split,
    pub origin: Origin,
    /// Seed that produced this record: the split seed for originals, the
    /// per-variant stream seed for augmented images.
    pub seed: u64,
}

impl Sample {
    /// Identifier used as the provenance key of derived samples.
    pub fn id(&self) -> String {
        self.image_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    }
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<Sample>,
    pub seed: u64,
    /// Files under the root that could not be decoded. Not persisted.
    #[serde(skip)]
    pub skipped: Vec<SkippedFile>,
}

impl DatasetManifest {
    pub fn new(records: Vec<Sample>, seed: u64) -> Self {
        Self { records, seed, skipped: Vec::new() }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.records.iter().filter(move |s| s.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Sample counts per `(split, label)`; absent pairs are omitted.
    pub fn counts(&self) -> BTreeMap<(Split, Label), usize> {
        let mut out = BTreeMap::new();
        for s in &self.records {
            *out.entry((s.split, s.label)).or_insert(0) += 1;
        }
        out
    }

    pub fn class_counts(&self, split: Split) -> [usize; 3] {
        let mut out = [0; 3];
        for s in self.split(split) {
            out[s.label.index()] += 1;
        }
        out
    }

    /// Tab-separated text. Paths inside `base` are written relative to it.
    pub fn to_tsv(&self, base: Option<&Path>) -> Result<String> {
        let mut out = format!("# leafkit manifest seed={}\n", self.seed);
        for s in &self.records {
            let path = base
                .and_then(|b| s.image_path.strip_prefix(b).ok())
                .unwrap_or(&s.image_path);
            let path = path
                .to_str()
                .ok_or_else(|| LeafError::Dataset(format!("non UTF-8 path {}", s.image_path.display())))?;
            if path.contains(['\t', '\n']) {
                return Err(LeafError::Dataset(format!("path contains a tab or newline: {path:?}")));
            }
            out.push_str(&format!("{path}\t{}\t{}\t{}\t{}\n", s.label, s.split, s.origin, s.seed));
        }
        Ok(out)
    }

    /// Parses [`DatasetManifest::to_tsv`] output; relative paths are joined to `base`.
    pub fn from_tsv(text: &str, base: &Path) -> Result<Self> {
        let mut manifest = Self::default();
        for (n, line) in text.lines().enumerate() {
            if let Some(header) = line.strip_prefix('#') {
                if let Some(seed) = header.split_whitespace().find_map(|w| w.strip_prefix("seed=")) {
                    manifest.seed = seed
                        .parse()
                        .map_err(|_| LeafError::Dataset(format!("line {}: bad seed '{seed}'", n + 1)))?;
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [path, label, split, origin, seed] = fields[..] else {
                return Err(LeafError::Dataset(format!("line {}: expected 5 tab-separated fields", n + 1)));
            };
            let wrap = |e: LeafError| LeafError::Dataset(format!("line {}: {e}", n + 1));
            let path = Path::new(path);
            manifest.records.push(Sample {
                image_path: if path.is_absolute() { path.to_path_buf() } else { base.join(path) },
                label: label.parse().map_err(wrap)?,
                split: split.parse().map_err(wrap)?,
                origin: origin.parse().map_err(wrap)?,
                seed: seed.parse().map_err(|_| LeafError::Dataset(format!("line {}: bad seed '{seed}'", n + 1)))?,
            });
        }
        Ok(manifest)
    }

    /// Writes the manifest with paths relative to its own directory where possible.
    pub fn write(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| LeafError::io(dir, e))?;
        let base = fs::canonicalize(dir).map_err(|e| LeafError::io(dir, e))?;
        fs::write(path, self.to_tsv(Some(&base))?).map_err(|e| LeafError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LeafError::io(path, e))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let base = fs::canonicalize(dir).map_err(|e| LeafError::io(dir, e))?;
        Self::from_tsv(&text, &base)
    }

    /// Rejects augmented records outside the training split.
    pub fn validate(&self) -> Result<()> {
        match self.records.iter().find(|s| s.split != Split::Train && s.origin != Origin::Original) {
            Some(s) => Err(LeafError::Dataset(format!(
                "{} sample {} is augmented",
                s.split,
                s.image_path.display()
            ))),
            None => Ok(()),
        }
    }
}

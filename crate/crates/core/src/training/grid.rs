use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, save_model, train_on, TrainingConfig, TrainingHistory};
use crate::data::{DatasetManifest, LoadedSplit, Split, TrainingSet};
use crate::error::{LeafError, Result};
use crate::layers::{Architecture, NUM_CLASSES};
use crate::metrics::{mcc_multiclass, weighted_f1};

#[derive(Debug, Clone)]
pub struct GridConfig {
    pub architectures: Vec<Architecture>,
    pub training_sets: Vec<TrainingSet>,
    pub runs: usize,
    /// Run `i` of every cell uses seed `base_seed + i`.
    pub base_seed: u64,
    /// Hyperparameters shared by every run; seed, architecture and set are
    /// overwritten per run.
    pub template: TrainingConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Runs trained concurrently.
    pub jobs: usize,
}

/// Test-split scores of one checkpoint. All values are fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    pub accuracy: f64,
    pub loss: f64,
    pub weighted_f1: f64,
    pub mcc: f64,
}

/// Contents of one per-run JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub history: TrainingHistory,
    pub test: TestMetrics,
    pub checkpoint: PathBuf,
}

/// Five-number summary with Tukey fences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    /// Most extreme values inside `[q1 - 1.5 IQR, q3 + 1.5 IQR]`.
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub architecture: Architecture,
    pub training_set: TrainingSet,
    pub seeds: Vec<u64>,
    /// Run with the highest test accuracy (earlier seed on ties).
    pub best_seed: u64,
    pub best: TestMetrics,
    pub accuracy: Distribution,
    pub runs: Vec<TestMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub runs_per_cell: usize,
    pub cells: Vec<CellSummary>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Quartiles by linear interpolation between order statistics.
pub fn distribution(values: &[f64]) -> Result<Distribution> {
    if values.is_empty() {
        return Err(LeafError::Config("distribution of an empty sample".into()));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(LeafError::Numeric(format!("non-finite value {v} in distribution")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile(&sorted, 0.25), quantile(&sorted, 0.5), quantile(&sorted, 0.75));
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let mut inside = sorted.iter().copied().filter(|v| (lo_fence..=hi_fence).contains(v));
    let whisker_low = inside.clone().next().unwrap_or(median);
    let whisker_high = inside.next_back().unwrap_or(median);
    Ok(Distribution {
        n: sorted.len(),
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        min: sorted[0],
        q1,
        median,
        q3,
        max: sorted[sorted.len() - 1],
        whisker_low,
        whisker_high,
        outliers: sorted.iter().copied().filter(|v| !(lo_fence..=hi_fence).contains(v)).collect(),
    })
}

pub fn run_file_stem(arch: Architecture, set: TrainingSet, seed: u64) -> String {
    format!("{arch}_{set}_seed{seed}")
}

struct SetData {
    train: LoadedSplit,
    val: LoadedSplit,
    test: LoadedSplit,
}

fn load_set(data_dir: &Path, set: TrainingSet, resolution: usize) -> Result<SetData> {
    let path = set.manifest_path(data_dir);
    if !path.is_file() {
        return Err(LeafError::Dataset(format!("no manifest for training set '{set}' at {}", path.display())));
    }
    let manifest = DatasetManifest::read(&path)?;
    manifest.validate()?;
    Ok(SetData {
        train: LoadedSplit::from_manifest(&manifest, Split::Train, resolution)?,
        val: LoadedSplit::from_manifest(&manifest, Split::Val, resolution)?,
        test: LoadedSplit::from_manifest(&manifest, Split::Test, resolution)?,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| LeafError::io(path, e))
}

/// Trains every architecture × training-set cell `runs` times. Writes
/// `runs/<stem>.json`, `checkpoints/<stem>.lfkt` and `summary.json` under
/// the output directory.
pub fn run_experiment_grid(cfg: &GridConfig) -> Result<GridReport> {
    if cfg.runs == 0 {
        return Err(LeafError::Config("runs must be at least 1".into()));
    }
    if cfg.architectures.is_empty() || cfg.training_sets.is_empty() {
        return Err(LeafError::Config("grid needs at least one architecture and one training set".into()));
    }
    cfg.template.validate()?;
    let runs_dir = cfg.out_dir.join("runs");
    let ckpt_dir = cfg.out_dir.join("checkpoints");
    for dir in [&runs_dir, &ckpt_dir] {
        fs::create_dir_all(dir).map_err(|e| LeafError::io(dir, e))?;
    }

    let mut sets = BTreeMap::new();
    for &set in &cfg.training_sets {
        if let Entry::Vacant(slot) = sets.entry(set) {
            slot.insert(load_set(&cfg.data_dir, set, cfg.template.resolution)?);
        }
    }

    let mut tasks = Vec::new();
    for &arch in &cfg.architectures {
        for &set in &cfg.training_sets {
            for i in 0..cfg.runs {
                tasks.push((arch, set, cfg.base_seed.wrapping_add(i as u64)));
            }
        }
    }
    let run_one = |&(arch, set, seed): &(Architecture, TrainingSet, u64)| -> Result<RunRecord> {
        let data = &sets[&set];
        let config = TrainingConfig { seed, architecture: arch, training_set: set, ..cfg.template.clone() };
        let (ckpt, history) = train_on(&config, &data.train, &data.val)?;
        let model = ckpt.model()?;
        let eval = evaluate(&model, &data.test, config.batch_size)?;
        let cm = eval.confusion(data.test.labels(), NUM_CLASSES)?;
        let mcc = mcc_multiclass(&cm);
        let test = TestMetrics {
            accuracy: eval.accuracy(data.test.labels()),
            loss: eval.loss,
            weighted_f1: weighted_f1(&cm),
            mcc,
        };
        let stem = run_file_stem(arch, set, seed);
        let ckpt_path = ckpt_dir.join(format!("{stem}.lfkt"));
        save_model(&ckpt, &ckpt_path)?;
        let record = RunRecord { history, test, checkpoint: PathBuf::from("checkpoints").join(format!("{stem}.lfkt")) };
        write_json(&runs_dir.join(format!("{stem}.json")), &record)?;
        log::info!("{stem}: test accuracy {:.4}", test.accuracy);
        Ok(record)
    };
    let records: Vec<RunRecord> = if cfg.jobs <= 1 {
        tasks.iter().map(run_one).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| LeafError::Config(format!("cannot start {} workers: {e}", cfg.jobs)))?;
        pool.install(|| tasks.par_iter().map(run_one).collect::<Result<_>>())?
    };

    let mut cells = Vec::new();
    for (cell_tasks, cell_records) in tasks.chunks(cfg.runs).zip(records.chunks(cfg.runs)) {
        let (arch, set, _) = cell_tasks[0];
        let runs: Vec<TestMetrics> = cell_records.iter().map(|r| r.test).collect();
        let seeds: Vec<u64> = cell_tasks.iter().map(|t| t.2).collect();
        let mut best = 0;
        for (i, r) in runs.iter().enumerate() {
            if r.accuracy > runs[best].accuracy {
                best = i;
            }
        }
        let accs: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
        cells.push(CellSummary {
            architecture: arch,
            training_set: set,
            best_seed: seeds[best],
            best: runs[best],
            accuracy: distribution(&accs)?,
            seeds,
            runs,
        });
    }
    let report = GridReport { runs_per_cell: cfg.runs, cells };
    write_json(&cfg.out_dir.join("summary.json"), &report)?;
    Ok(report)
}

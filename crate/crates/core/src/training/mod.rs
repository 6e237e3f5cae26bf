//! Adam training loop, evaluation, checkpoints and the experiment grid.

mod adam;
mod checkpoint;
mod grid;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{DatasetManifest, LoadedSplit, Split, TrainingSet};
use crate::error::{LeafError, Result};
use crate::layers::{Architecture, Model, ModelSpec, DEFAULT_RESOLUTION};
use crate::metrics::{confusion, ConfusionMatrix};
use crate::tensor::Tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_model, save_model, Checkpoint, CheckpointMeta, FORMAT_VERSION, MAGIC};
pub use grid::{
    distribution, run_experiment_grid, run_file_stem, CellSummary, Distribution, GridConfig, GridReport, RunRecord,
    TestMetrics,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub architecture: Architecture,
    pub training_set: TrainingSet,
    /// Square input side in pixels.
    pub resolution: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 40,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
            architecture: Architecture::BaselineCnn,
            training_set: TrainingSet::Original,
            resolution: DEFAULT_RESOLUTION,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(LeafError::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(LeafError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(LeafError::Config("batch size must be at least 1".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.epsilon <= 0.0 {
            return Err(LeafError::Config(format!("invalid Adam constants {a:?}")));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::for_architecture(self.architecture, self.resolution)
    }
}

/// Per-epoch scalars; accuracies are fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub config: TrainingConfig,
    pub param_count: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
}

impl TrainingHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.get(self.best_epoch.checked_sub(1)?)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn row_argmax(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits.data().chunks(k).map(argmax).collect()
}

/// One forward/backward pass and Adam update on a batch. Returns the
/// pre-update mean loss and predictions.
pub fn train_step(
    model: &mut Model,
    state: &mut AdamState,
    images: &Tensor,
    labels: &[usize],
    lr: f64,
    adam: &AdamConfig,
) -> Result<(f32, Vec<usize>)> {
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let fwd = model.forward(&mut tape, x)?;
    let loss = tape.softmax_cross_entropy(fwd.logits, labels)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(LeafError::Numeric(format!("training loss is {value}")));
    }
    let predictions = row_argmax(tape.value(fwd.logits));
    tape.backward(loss)?;
    let grads: Vec<Vec<f32>> = fwd
        .params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.tensor.len()], <[f32]>::to_vec))
        .collect();
    drop(tape);
    adam_step(model.params_mut(), &grads, state, lr, adam)?;
    Ok((value, predictions))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Mean cross-entropy over the split.
    pub loss: f64,
    pub predictions: Vec<usize>,
}

impl Evaluation {
    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        let correct = self.predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
        correct as f64 / labels.len().max(1) as f64
    }

    pub fn confusion(&self, labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
        confusion(labels, &self.predictions, classes)
    }
}

/// Gradient-free pass over a split in fixed order.
pub fn evaluate(model: &Model, data: &LoadedSplit, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(LeafError::Config("cannot evaluate an empty split".into()));
    }
    let batch_size = batch_size.max(1);
    let mut loss_sum = 0.0f64;
    let mut predictions = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let images = data.batch(chunk)?;
        let labels = data.batch_labels(chunk);
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let params: Vec<_> = model.params().iter().map(|p| tape.constant(p.tensor.clone())).collect();
        let fwd = model.forward_with(&mut tape, x, &params)?;
        let loss = tape.softmax_cross_entropy(fwd.logits, &labels)?;
        loss_sum += tape.value(loss).item()? as f64 * chunk.len() as f64;
        predictions.extend(row_argmax(tape.value(fwd.logits)));
    }
    Ok(Evaluation { loss: loss_sum / data.len() as f64, predictions })
}

/// Loads `split` at the model's input resolution and evaluates it.
pub fn evaluate_manifest(model: &Model, manifest: &DatasetManifest, split: Split) -> Result<(Evaluation, Vec<usize>)> {
    let data = LoadedSplit::from_manifest(manifest, split, model.spec().input_height)?;
    let eval = evaluate(model, &data, 32)?;
    Ok((eval, data.labels().to_vec()))
}

const SHUFFLE_STREAM: u64 = 0x5348_5546_464c_4521;

/// Trains on in-memory splits and keeps the weights of the epoch with the
/// best validation accuracy (the earlier epoch on ties).
pub fn train_on(config: &TrainingConfig, train: &LoadedSplit, val: &LoadedSplit) -> Result<(Checkpoint, TrainingHistory)> {
    config.validate()?;
    if train.is_empty() {
        return Err(LeafError::Config("training split is empty".into()));
    }
    if val.is_empty() {
        return Err(LeafError::Config("validation split is empty".into()));
    }
    let spec = config.model_spec()?;
    for (name, split) in [("training", train), ("validation", val)] {
        if split.resolution() != spec.input_height {
            return Err(LeafError::Config(format!(
                "{name} images are {0}x{0}, the model expects {1}x{1}",
                split.resolution(),
                spec.input_height
            )));
        }
    }
    let mut model = Model::build(spec, config.seed)?;
    let mut state = AdamState::new(model.params());
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainingHistory {
        config: config.clone(),
        param_count: model.param_count(),
        train_samples: train.len(),
        val_samples: val.len(),
        epochs: Vec::with_capacity(config.epochs),
        best_epoch: 0,
    };
    let mut best: Option<(f64, Checkpoint)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let images = train.batch(chunk)?;
            let labels = train.batch_labels(chunk);
            let (loss, preds) =
                train_step(&mut model, &mut state, &images, &labels, config.learning_rate, &config.adam)
                    .map_err(|e| match e {
                        LeafError::Numeric(m) => LeafError::Numeric(format!("epoch {epoch}: {m}")),
                        other => other,
                    })?;
            loss_sum += loss as f64 * chunk.len() as f64;
            correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
        let eval = evaluate(&model, val, config.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_loss: eval.loss,
            val_accuracy: eval.accuracy(val.labels()),
        };
        log::info!(
            "{} epoch {epoch}/{}: train loss {:.4} acc {:.4}, val loss {:.4} acc {:.4}",
            config.architecture,
            config.epochs,
            record.train_loss,
            record.train_accuracy,
            record.val_loss,
            record.val_accuracy
        );
        history.epochs.push(record);
        if best.as_ref().is_none_or(|(acc, _)| record.val_accuracy > *acc) {
            let meta = CheckpointMeta { config: config.clone(), epoch, metrics: Some(record) };
            best = Some((record.val_accuracy, Checkpoint::from_model(&model, meta)));
            history.best_epoch = epoch;
        }
    }
    let (_, checkpoint) = best.expect("at least one epoch");
    Ok((checkpoint, history))
}

/// Loads the manifest's train and validation splits at the configured
/// resolution, then runs [`train_on`].
pub fn train(config: &TrainingConfig, manifest: &DatasetManifest) -> Result<(Checkpoint, TrainingHistory)> {
    config.validate()?;
    manifest.validate()?;
    if manifest.count(Split::Train) == 0 {
        return Err(LeafError::Config("training split is empty".into()));
    }
    let train = LoadedSplit::from_manifest(manifest, Split::Train, config.resolution)?;
    let val = LoadedSplit::from_manifest(manifest, Split::Val, config.resolution)?;
    train_on(config, &train, &val)
}

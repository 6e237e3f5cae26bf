//! The `leafkit` command line: split, augment, train, eval, gradcam and
//! compare.

mod plots;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{build_augmented_set, load_and_split, AugmentationKind, DatasetManifest, ImageF32, Label, Split, TrainingSet};
use crate::error::{LeafError, Result};
use crate::explain::{gradcam, last_conv_layer, render_overlay, save_overlay};
use crate::layers::{Architecture, DEFAULT_RESOLUTION, NUM_CLASSES};
use crate::metrics::MetricsReport;
use crate::training::{
    argmax, evaluate_manifest, load_model, run_experiment_grid, save_model, train, GridConfig, GridReport,
    TrainingConfig,
};

pub use plots::box_plot_svg;

pub const HISTORY_FILE: &str = "history.json";
pub const CHECKPOINT_FILE: &str = "model.lfkt";

#[derive(Debug, Parser)]
#[command(name = "leafkit", version, about = "Train and inspect bean leaf disease classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split a class-per-directory image tree into train/val/test.
    Split(SplitArgs),
    /// Generate augmented training sets from a split.
    Augment(AugmentArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Score a checkpoint on a split.
    Eval(EvalArgs),
    /// Render a Grad-CAM overlay for one image.
    Gradcam(GradcamArgs),
    /// Train the architecture x training-set grid and summarize it.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Directory with one sub-directory per class.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// Directory holding the split's manifest.tsv.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// brightness, crop, flip, rotation, combination or all.
    #[arg(long, default_value = "all")]
    pub set: String,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Side length of the written images.
    #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
    pub resolution: usize,
}

#[derive(Debug, Clone, Args)]
pub struct Hyper {
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Input side length; must be a multiple of 8.
    #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
    pub resolution: usize,
}

impl Hyper {
    fn config(&self, arch: Architecture, set: TrainingSet, seed: u64) -> Result<TrainingConfig> {
        let cfg = TrainingConfig {
            learning_rate: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            architecture: arch,
            training_set: set,
            resolution: self.resolution,
            ..Default::default()
        };
        cfg.validate()?;
        cfg.model_spec()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Data directory: the split manifest plus one folder per augmented set.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "cnn")]
    pub arch: Architecture,
    #[arg(long, default_value = "original")]
    pub set: TrainingSet,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[command(flatten)]
    pub hyper: Hyper,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory holding the split's manifest.tsv.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Also write report.json here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcamArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Conv layer index; defaults to the last convolution.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Class name or index; defaults to the predicted class.
    #[arg(long)]
    pub class: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f32,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated architectures or `all`.
    #[arg(long, default_value = "all")]
    pub arch: String,
    /// Comma-separated training sets or `all`.
    #[arg(long, default_value = "all")]
    pub set: String,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Seed of the first run in each cell.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[command(flatten)]
    pub hyper: Hyper,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status. Failures print one `error:` line to stderr.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments").trim();
            eprintln!("{}", if line.starts_with("error:") { line.to_string() } else { format!("error: {line}") });
            return 2;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Split(a) => cmd_split(&a),
        Command::Augment(a) => cmd_augment(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Gradcam(a) => cmd_gradcam(&a),
        Command::Compare(a) => cmd_compare(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LeafError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| LeafError::io(path, e))
}

fn read_manifest(dir: &Path, set: TrainingSet) -> Result<DatasetManifest> {
    let path = set.manifest_path(dir);
    if !path.is_file() {
        return Err(LeafError::Dataset(format!("no manifest for training set '{set}' at {}", path.display())));
    }
    let manifest = DatasetManifest::read(&path)?;
    manifest.validate()?;
    Ok(manifest)
}

/// Per-split class counts as a small table.
pub fn count_table(manifest: &DatasetManifest) -> String {
    let mut s = format!("{:<6}", "split");
    for label in Label::ALL {
        let _ = write!(s, " {:>18}", label.as_str());
    }
    s.push_str("  total\n");
    for split in [Split::Train, Split::Val, Split::Test] {
        let counts = manifest.class_counts(split);
        let _ = write!(s, "{:<6}", split.as_str());
        for c in counts {
            let _ = write!(s, " {c:>18}");
        }
        let _ = writeln!(s, "  {:>5}", counts.iter().sum::<usize>());
    }
    s
}

pub fn cmd_split(a: &SplitArgs) -> Result<()> {
    let manifest = load_and_split(&a.data, a.seed)?;
    for skipped in &manifest.skipped {
        log::warn!("skipped {}: {}", skipped.path.display(), skipped.reason);
    }
    create_dir(&a.out)?;
    manifest.write(&TrainingSet::Original.manifest_path(&a.out))?;
    print!("{}", count_table(&manifest));
    if !manifest.skipped.is_empty() {
        println!("skipped {} files", manifest.skipped.len());
    }
    Ok(())
}

fn parse_kinds(text: &str) -> Result<Vec<AugmentationKind>> {
    if text == "all" {
        return Ok(AugmentationKind::ALL.to_vec());
    }
    text.split(',').map(|k| k.trim().parse()).collect()
}

pub fn cmd_augment(a: &AugmentArgs) -> Result<()> {
    let kinds = parse_kinds(&a.set)?;
    let manifest = read_manifest(&a.data, TrainingSet::Original)?;
    create_dir(&a.out)?;
    let out_manifest = TrainingSet::Original.manifest_path(&a.out);
    if fs::canonicalize(&out_manifest).ok() != fs::canonicalize(TrainingSet::Original.manifest_path(&a.data)).ok() {
        manifest.write(&out_manifest)?;
    }
    for kind in kinds {
        let (set, stats) = build_augmented_set(&manifest, kind, a.seed, &a.out.join(kind.as_str()), a.resolution)?;
        let c = set.class_counts(Split::Train);
        println!(
            "{kind:<12} train {:>5} ({} / {} / {})  generated {:>5}  mean {:.4}  variance {:.4}",
            set.count(Split::Train),
            c[0],
            c[1],
            c[2],
            stats.generated,
            stats.mean,
            stats.variance
        );
    }
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let config = a.hyper.config(a.arch, a.set, a.seed)?;
    let manifest = read_manifest(&a.data, a.set)?;
    create_dir(&a.out)?;
    let (ckpt, history) = train(&config, &manifest)?;
    save_model(&ckpt, &a.out.join(CHECKPOINT_FILE))?;
    write_text(&a.out.join(HISTORY_FILE), &(serde_json::to_string_pretty(&history)? + "\n"))?;
    if let Some(best) = history.best() {
        println!(
            "{} on {}: best epoch {} of {}, val accuracy {:.2}%, val loss {:.4}",
            config.architecture,
            config.training_set,
            best.epoch,
            config.epochs,
            best.val_accuracy * 100.0,
            best.val_loss
        );
    }
    println!("wrote {} and {}", a.out.join(CHECKPOINT_FILE).display(), a.out.join(HISTORY_FILE).display());
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?.model()?;
    let manifest = read_manifest(&a.data, TrainingSet::Original)?;
    if manifest.count(a.split) == 0 {
        return Err(LeafError::Dataset(format!("{} split is empty", a.split)));
    }
    let (eval, labels) = evaluate_manifest(&model, &manifest, a.split)?;
    let cm = eval.confusion(&labels, NUM_CLASSES)?.with_class_names(&Label::ALL.map(Label::as_str))?;
    let report = MetricsReport::from_confusion(&cm);
    println!("{} split, mean loss {:.4}", a.split, eval.loss);
    print!("{report}");
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_text(&out.join("report.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    Ok(())
}

fn parse_class(text: &str) -> Result<usize> {
    match text.parse::<usize>() {
        Ok(i) if i < NUM_CLASSES => Ok(i),
        Ok(i) => Err(LeafError::Config(format!("class index {i} out of range"))),
        Err(_) => text.parse::<Label>().map(Label::index).map_err(|_| LeafError::Config(format!("unknown class '{text}'"))),
    }
}

pub fn cmd_gradcam(a: &GradcamArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(LeafError::Config(format!("alpha must lie in [0, 1], got {}", a.alpha)));
    }
    let class = a.class.as_deref().map(parse_class).transpose()?;
    let model = load_model(&a.checkpoint)?.model()?;
    let layer = match a.layer {
        Some(l) => l,
        None => last_conv_layer(&model).ok_or_else(|| LeafError::Config("model has no conv layer".into()))?,
    };
    let image = ImageF32::load(&a.image, Some(model.spec().input_height))?;
    let logits = model.predict_logits(&image.to_chw().reshape(&[1, 3, image.height(), image.width()])?)?;
    let predicted = argmax(logits.data());
    let class = class.unwrap_or(predicted);
    let heat = gradcam(&model, &image, class, layer)?;
    let overlay = render_overlay(&heat, &image, a.alpha)?;
    let stem = a.image.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
    let name = Label::from_index(class).map_or_else(|_| class.to_string(), |l| l.as_str().to_string());
    let path = a.out.join(format!("{stem}_{name}_layer{layer}.png"));
    let sidecar = save_overlay(&heat, &overlay, &path)?;
    println!(
        "predicted {}, map for {name} at layer {layer} ({}x{}), range [{:.4}, {:.4}]",
        Label::from_index(predicted)?,
        heat.height,
        heat.width,
        heat.min,
        heat.max
    );
    println!("wrote {} and {}", path.display(), sidecar.display());
    Ok(())
}

fn parse_list<T: std::str::FromStr<Err = LeafError> + Copy>(text: &str, all: &[T]) -> Result<Vec<T>> {
    if text == "all" {
        return Ok(all.to_vec());
    }
    text.split(',').map(|s| s.trim().parse()).collect()
}

/// One row per cell: best-run test scores and the accuracy spread.
pub fn summary_table(report: &GridReport) -> String {
    let mut s = format!(
        "{:<9} {:<12} {:>9} {:>7} {:>9} {:>8} {:>8} {:>8} {:>8} {:>4}\n",
        "arch", "set", "accuracy", "loss", "f1", "mcc", "median", "q1", "q3", "out"
    );
    for c in &report.cells {
        let d = &c.accuracy;
        let _ = writeln!(
            s,
            "{:<9} {:<12} {:>8.2}% {:>7.4} {:>8.2}% {:>7.2}% {:>7.2}% {:>7.2}% {:>7.2}% {:>4}",
            c.architecture.as_str(),
            c.training_set.as_str(),
            c.best.accuracy * 100.0,
            c.best.loss,
            c.best.weighted_f1 * 100.0,
            c.best.mcc * 100.0,
            d.median * 100.0,
            d.q1 * 100.0,
            d.q3 * 100.0,
            d.outliers.len()
        );
    }
    s
}

fn percent_distribution(d: &crate::training::Distribution) -> crate::training::Distribution {
    let p = |v: f64| v * 100.0;
    crate::training::Distribution {
        n: d.n,
        mean: p(d.mean),
        min: p(d.min),
        q1: p(d.q1),
        median: p(d.median),
        q3: p(d.q3),
        max: p(d.max),
        whisker_low: p(d.whisker_low),
        whisker_high: p(d.whisker_high),
        outliers: d.outliers.iter().map(|&v| p(v)).collect(),
    }
}

pub fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let architectures = parse_list(&a.arch, &Architecture::ALL)?;
    let training_sets = parse_list(&a.set, &TrainingSet::ALL)?;
    if a.runs == 0 {
        return Err(LeafError::Config("--runs must be at least 1".into()));
    }
    if a.jobs == 0 {
        return Err(LeafError::Config("--jobs must be at least 1".into()));
    }
    let template = a.hyper.config(architectures[0], training_sets[0], a.seed)?;
    for &set in &training_sets {
        let path = set.manifest_path(&a.data);
        if !path.is_file() {
            return Err(LeafError::Dataset(format!("no manifest for training set '{set}' at {}", path.display())));
        }
    }
    create_dir(&a.out)?;
    let report = run_experiment_grid(&GridConfig {
        architectures,
        training_sets,
        runs: a.runs,
        base_seed: a.seed,
        template,
        data_dir: a.data.clone(),
        out_dir: a.out.clone(),
        jobs: a.jobs,
    })?;
    let table = summary_table(&report);
    write_text(&a.out.join("summary.txt"), &table)?;
    let boxes: Vec<(String, _)> = report
        .cells
        .iter()
        .map(|c| (format!("{}/{}", c.architecture, c.training_set), percent_distribution(&c.accuracy)))
        .collect();
    let title = format!("Test accuracy over {} runs per cell", report.runs_per_cell);
    write_text(&a.out.join("accuracy_boxplot.svg"), &box_plot_svg(&title, "test accuracy (%)", &boxes))?;
    print!("{table}");
    Ok(())
}

//! Pipeline CLI: every stage reads the previous stage's files and writes its
//! own artifacts under the output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use folktalent::dataset::{
    class_distribution, load_manifest, save_manifest, stratified_split, DatasetManifest,
    PathCheck, Split, SplitRatios,
};
use folktalent::ensemble::{
    build_stacked_features, collect_probabilities, fit_meta, read_probability_cache, sweep_meta,
    write_probability_cache, MetaClassifier, MetaSweepGrid, ProbabilityCache, RandomForestConfig,
};
use folktalent::evaluate::{
    confusion, emit_report, load_report, mean_average_precision, EvaluationReport, MapReport,
    RunInfo,
};
use folktalent::model::{
    create_backbone, load_checkpoint, predict_class, predict_tags, save_checkpoint,
    ClassifierModel, LabelSpace, LoadedCheckpoint, TaskKind, TrainingMeta,
};
use folktalent::pipeline::{
    predict_split_classes, score_split_tags, PrepareOptions, PreparedDataset,
};
use folktalent::preprocess::{resize_normalize, trim_border, RasterImage, TrimPolicy};
use folktalent::synth::{generate, SynthConfig};
use folktalent::tags::{SynonymMap, TagVocabulary};
use folktalent::train::{train, write_run_log, MonitorScorer, SweepGrid, TrainingConfig};

#[derive(Parser)]
#[command(name = "folktalent", version, about = "Painting classification and tagging pipeline")]
struct Cli {
    /// Emit machine-readable JSON instead of human tables.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a raw manifest and freeze a normalized copy.
    Ingest(IngestArgs),
    /// Assign stratified train/validation/test splits.
    Split(SplitArgs),
    /// Build the tag vocabulary from the train split.
    BuildVocab(BuildVocabArgs),
    /// Fine-tune one model and checkpoint the best validation epoch.
    Train(TrainArgs),
    /// Grid-search learning rate, batch size, and LR factor.
    Sweep(SweepArgs),
    /// Stack base-model probabilities and fit the Random-Forest meta-classifier.
    Stack(StackArgs),
    /// Evaluate a checkpoint or a stacked ensemble on one split.
    Evaluate(EvaluateArgs),
    /// Predict the class or tags of a single image.
    Predict(PredictArgs),
    /// Combine evaluation reports into a per-model comparison table.
    Report(ReportArgs),
    /// Generate the synthetic desk-scale dataset.
    SynthData(SynthDataArgs),
}

fn default_out_dir() -> String {
    std::env::var("FOLKTALENT_OUT_DIR").unwrap_or_else(|_| "folktalent-out".into())
}

#[derive(Args)]
struct IngestArgs {
    /// Raw manifest CSV (id, path, class, tags[, split, crop]).
    #[arg(long)]
    manifest: PathBuf,
    /// Destination for the normalized manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = default_out_dir())]
    out_dir: String,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Train,validation,test fractions.
    #[arg(long, default_value = "0.6,0.2,0.2")]
    ratios: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = default_out_dir())]
    out_dir: String,
}

#[derive(Args)]
struct BuildVocabArgs {
    /// Split manifest (the train split is the vocabulary corpus).
    #[arg(long)]
    manifest: PathBuf,
    /// Synonym map file (`surface -> canonical` lines).
    #[arg(long)]
    synonyms: Option<PathBuf>,
    /// Vocabulary size cap.
    #[arg(long, default_value_t = 1500)]
    max_size: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = default_out_dir())]
    out_dir: String,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Multiclass,
    Multilabel,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Flags shared by the training-style commands. Precedence: built-in
/// defaults, then `--config` file values, then explicit flags.
#[derive(Args, Clone)]
struct TrainCommonArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Root directory image paths resolve against (default: the manifest's directory).
    #[arg(long)]
    images_root: Option<PathBuf>,
    /// Backbone adapter identifier, e.g. tiny-patch-8.
    #[arg(long, default_value = "tiny-patch-8")]
    backbone: String,
    #[arg(long, value_enum, default_value_t = TaskArg::Multiclass)]
    task: TaskArg,
    /// Vocabulary file; required for multilabel runs.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Synonym map used to canonicalize manifest tags.
    #[arg(long)]
    synonyms: Option<PathBuf>,
    /// Key-value config file merged under the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    early_stop_patience: Option<usize>,
    #[arg(long)]
    lr_patience: Option<usize>,
    #[arg(long)]
    lr_factor: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Skip the flip/scale augmentation of the train split.
    #[arg(long)]
    no_augment: bool,
    #[arg(long, default_value_t = default_out_dir())]
    out_dir: String,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: TrainCommonArgs,
    /// Artifact stem (default: the backbone identifier).
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: TrainCommonArgs,
    /// Comma-separated learning-rate axis.
    #[arg(long)]
    learning_rates: Option<String>,
    /// Comma-separated batch-size axis.
    #[arg(long)]
    batch_sizes: Option<String>,
    /// Comma-separated LR-factor axis.
    #[arg(long)]
    lr_factors: Option<String>,
}

#[derive(Args)]
struct StackArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    images_root: Option<PathBuf>,
    /// Comma-separated base-model checkpoint paths, in stacking order.
    #[arg(long, value_delimiter = ',')]
    models: Vec<PathBuf>,
    /// Split whose probabilities the meta-classifier is fitted on.
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    fit_split: SplitArg,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_estimators: Option<usize>,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    min_samples_split: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run the 80-cell forest sweep (selected on validation accuracy)
    /// before the final fit.
    #[arg(long)]
    sweep: bool,
    #[arg(long, default_value_t = default_out_dir())]
    out_dir: String,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    images_root: Option<PathBuf>,
    /// Checkpoint to evaluate (multiclass or multilabel).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Multilabel checkpoint whose mAP is attached to the classification report.
    #[arg(long)]
    tagging_checkpoint: Option<PathBuf>,
    /// Meta-classifier file (requires --models).
    #[arg(long)]
    meta: Option<PathBuf>,
    /// Base-model checkpoints in the meta-classifier's stacking order.
    #[arg(long, value_delimiter = ',')]
    models: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = default_out_dir())]
    out_dir: String,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Tag selection threshold (scores must strictly exceed it).
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args)]
struct ReportArgs {
    /// Evaluation report JSON files.
    #[arg(long, value_delimiter = ',')]
    inputs: Vec<PathBuf>,
    /// Optional CSV destination for the comparison table.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthDataArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    per_class: usize,
    #[arg(long, default_value_t = 224)]
    size: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_frames: bool,
    #[arg(long, default_value_t = default_out_dir())]
    out_dir: String,
}

/// `--config` file schema: top-level seed plus [training] and [forest]
/// tables mirroring the in-memory configs.
#[derive(Debug, Default, Deserialize)]
struct FileConfig {
    seed: Option<u64>,
    #[serde(default)]
    training: TrainingPatch,
    #[serde(default)]
    forest: ForestPatch,
}

#[derive(Debug, Default, Deserialize)]
struct TrainingPatch {
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
    max_epochs: Option<usize>,
    early_stop_patience: Option<usize>,
    lr_patience: Option<usize>,
    lr_factor: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
struct ForestPatch {
    n_estimators: Option<usize>,
    max_depth: Option<usize>,
    min_samples_split: Option<usize>,
}

fn load_file_config(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config file {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config file {}", p.display()))
        }
    }
}

fn main() {
    // Die quietly when stdout is a closed pipe (e.g. `folktalent split | head`)
    // instead of panicking on the write.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Ingest(args) => cmd_ingest(args, cli.json),
        Command::Split(args) => cmd_split(args, cli.json),
        Command::BuildVocab(args) => cmd_build_vocab(args, cli.json),
        Command::Train(args) => cmd_train(args, cli.json),
        Command::Sweep(args) => cmd_sweep(args, cli.json),
        Command::Stack(args) => cmd_stack(args, cli.json),
        Command::Evaluate(args) => cmd_evaluate(args, cli.json),
        Command::Predict(args) => cmd_predict(args, cli.json),
        Command::Report(args) => cmd_report(args, cli.json),
        Command::SynthData(args) => cmd_synth_data(args, cli.json),
    }
}

/// RFC 3339 UTC timestamp from the system clock (civil-from-days
/// conversion, no external dependency).
fn now_rfc3339() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let days = (secs / 86_400) as i64;
    let (h, m, s) = ((secs / 3600) % 24, (secs / 60) % 60, secs % 60);
    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let month = if mp < 10 { mp + 3 } else { mp - 9 };
    let year = if month <= 2 { y + 1 } else { y };
    format!("{year:04}-{month:02}-{d:02}T{h:02}:{m:02}:{s:02}Z")
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn require_artifact(path: &Path, what: &str, produced_by: &str) -> anyhow::Result<()> {
    if !path.exists() {
        bail!("{what} not found at {}; run `folktalent {produced_by}` first", path.display());
    }
    Ok(())
}

fn parse_ratios(s: &str) -> anyhow::Result<SplitRatios> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("parsing ratios '{s}'"))?;
    let [train, validation, test] = parts[..] else {
        bail!("ratios must be three comma-separated fractions, e.g. 0.6,0.2,0.2");
    };
    Ok(SplitRatios::new(train, validation, test)?)
}

fn print_distribution(manifest: &DatasetManifest, json: bool) -> anyhow::Result<()> {
    let dist = class_distribution(manifest)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&dist)?);
        return Ok(());
    }
    println!("{:<18} {:>7} {:>11} {:>6} {:>7}", "class", "train", "validation", "test", "total");
    for (i, class) in dist.classes.iter().enumerate() {
        let c = dist.counts[i];
        println!("{:<18} {:>7} {:>11} {:>6} {:>7}", class, c[0], c[1], c[2], dist.class_total(i));
    }
    println!("total images: {}", dist.total());
    Ok(())
}

fn cmd_ingest(args: IngestArgs, json: bool) -> anyhow::Result<()> {
    let manifest = load_manifest(&args.manifest, PathCheck::Require)?;
    let out_dir = PathBuf::from(&args.out_dir);
    ensure_dir(&out_dir)?;
    let out = args.out.unwrap_or_else(|| out_dir.join("manifest.csv"));
    save_manifest(&manifest, &out)?;
    if json {
        println!(
            "{}",
            serde_json::json!({
                "records": manifest.len(),
                "classes": manifest.registry().classes(),
                "out": out,
            })
        );
    } else {
        println!(
            "ingested {} records across {} classes -> {}",
            manifest.len(),
            manifest.registry().len(),
            out.display()
        );
    }
    Ok(())
}

fn cmd_split(args: SplitArgs, json: bool) -> anyhow::Result<()> {
    require_artifact(&args.manifest, "manifest", "ingest")?;
    let manifest = load_manifest(&args.manifest, PathCheck::Skip)?;
    let ratios = parse_ratios(&args.ratios)?;
    let split = stratified_split(&manifest, ratios, args.seed)?;
    let out_dir = PathBuf::from(&args.out_dir);
    ensure_dir(&out_dir)?;
    let out = args.out.unwrap_or_else(|| out_dir.join("split.csv"));
    save_manifest(&split, &out)?;
    if !json {
        println!("split written to {}", out.display());
    }
    print_distribution(&split, json)
}

fn cmd_build_vocab(args: BuildVocabArgs, json: bool) -> anyhow::Result<()> {
    require_artifact(&args.manifest, "split manifest", "split")?;
    let manifest = load_manifest(&args.manifest, PathCheck::Skip)?;
    let synonyms = match &args.synonyms {
        Some(p) => SynonymMap::from_file(p)?,
        None => SynonymMap::new(),
    };
    let (vocab, stats) = folktalent::tags::build_vocabulary(&manifest, &synonyms, args.max_size)?;
    let out_dir = PathBuf::from(&args.out_dir);
    ensure_dir(&out_dir)?;
    let out = args.out.unwrap_or_else(|| out_dir.join("vocab.txt"));
    vocab.write_file(&out)?;
    if json {
        println!(
            "{}",
            serde_json::json!({
                "size": vocab.len(),
                "distinct_tags": stats.distinct_tags,
                "truncated": stats.truncated,
                "out": out,
            })
        );
    } else {
        println!(
            "vocabulary of {} tags written to {} ({} distinct, {} cut by the cap)",
            vocab.len(),
            out.display(),
            stats.distinct_tags,
            stats.truncated
        );
    }
    Ok(())
}

struct TrainSetup {
    manifest: DatasetManifest,
    images_root: PathBuf,
    config: TrainingConfig,
    task: TaskKind,
    vocab: Option<TagVocabulary>,
    synonyms: SynonymMap,
    out_dir: PathBuf,
}

fn resolve_train_setup(common: &TrainCommonArgs) -> anyhow::Result<TrainSetup> {
    require_artifact(&common.manifest, "split manifest", "split")?;
    let manifest = load_manifest(&common.manifest, PathCheck::Skip)?;
    let images_root = common
        .images_root
        .clone()
        .or_else(|| common.manifest.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));

    let file = load_file_config(common.config.as_deref())?;
    let mut config = TrainingConfig::default();
    let patch = &file.training;
    config.learning_rate =
        common.learning_rate.or(patch.learning_rate).unwrap_or(config.learning_rate);
    config.batch_size = common.batch_size.or(patch.batch_size).unwrap_or(config.batch_size);
    config.max_epochs = common.max_epochs.or(patch.max_epochs).unwrap_or(config.max_epochs);
    config.early_stop_patience = common
        .early_stop_patience
        .or(patch.early_stop_patience)
        .unwrap_or(config.early_stop_patience);
    config.lr_patience = common.lr_patience.or(patch.lr_patience).unwrap_or(config.lr_patience);
    config.lr_factor = common.lr_factor.or(patch.lr_factor).unwrap_or(config.lr_factor);
    config.seed = common.seed.or(file.seed).unwrap_or(config.seed);
    config.validate()?;

    let task = match common.task {
        TaskArg::Multiclass => TaskKind::Multiclass,
        TaskArg::Multilabel => TaskKind::Multilabel,
    };
    let vocab = match (&common.vocab, task) {
        (Some(path), _) => {
            require_artifact(path, "vocabulary", "build-vocab")?;
            Some(TagVocabulary::from_file(path)?)
        }
        (None, TaskKind::Multilabel) => {
            bail!("multilabel training needs --vocab; run `folktalent build-vocab` first")
        }
        (None, TaskKind::Multiclass) => None,
    };
    let synonyms = match &common.synonyms {
        Some(p) => SynonymMap::from_file(p)?,
        None => SynonymMap::new(),
    };
    let out_dir = PathBuf::from(&common.out_dir);
    ensure_dir(&out_dir)?;
    Ok(TrainSetup { manifest, images_root, config, task, vocab, synonyms, out_dir })
}

fn cmd_train(args: TrainArgs, json: bool) -> anyhow::Result<()> {
    let setup = resolve_train_setup(&args.common)?;
    let backbone = create_backbone(&args.common.backbone, setup.config.seed)?;
    let profile = backbone.profile().clone();

    let vocab_ref = setup.vocab.as_ref().map(|v| (v, &setup.synonyms));
    let data = PreparedDataset::prepare(
        &setup.manifest,
        &profile,
        &setup.images_root,
        vocab_ref,
        &PrepareOptions {
            augment_train: !args.common.no_augment,
            augment_seed: setup.config.seed,
            ..Default::default()
        },
    )?;

    let (output_dim, label_space) = match setup.task {
        TaskKind::Multiclass => (
            setup.manifest.registry().len(),
            LabelSpace::Classes(setup.manifest.registry().classes().to_vec()),
        ),
        TaskKind::Multilabel => {
            let vocab = setup.vocab.as_ref().expect("validated in setup");
            (vocab.len(), LabelSpace::Tags(vocab.tags().to_vec()))
        }
    };
    let mut model = ClassifierModel::new(backbone, setup.task, output_dim, setup.config.seed)?;

    let run = train(&mut model, &data, &setup.config, &mut MonitorScorer)?;
    model.set_parameters(&run.checkpoint.params)?;

    let name = args.name.unwrap_or_else(|| args.common.backbone.clone());
    let ckpt_path = setup.out_dir.join(format!("{name}.ckpt.json"));
    let log_path = setup.out_dir.join(format!("{name}.runlog.jsonl"));
    save_checkpoint(
        &ckpt_path,
        &model,
        &label_space,
        TrainingMeta {
            seed: setup.config.seed,
            best_epoch: run.checkpoint.metrics.epoch,
            best_metric: run.checkpoint.metrics.validation_metric,
            monitor: run.monitor.clone(),
            timestamp: now_rfc3339(),
        },
    )?;
    write_run_log(&run.log, &log_path)?;

    if json {
        println!(
            "{}",
            serde_json::json!({
                "checkpoint": ckpt_path,
                "run_log": log_path,
                "epochs": run.log.len(),
                "best_epoch": run.checkpoint.metrics.epoch,
                "best_validation_metric": run.checkpoint.metrics.validation_metric,
            })
        );
    } else {
        println!(
            "trained {name}: {} epochs, best validation {:.2} at epoch {}",
            run.log.len(),
            run.checkpoint.metrics.validation_metric,
            run.checkpoint.metrics.epoch
        );
        println!("checkpoint: {}", ckpt_path.display());
        println!("run log:    {}", log_path.display());
    }
    Ok(())
}

fn parse_axis<T: std::str::FromStr>(
    s: &Option<String>,
    name: &str,
) -> anyhow::Result<Option<Vec<T>>>
where
    T::Err: std::fmt::Display,
{
    match s {
        None => Ok(None),
        Some(s) => {
            let vals: Result<Vec<T>, _> = s.split(',').map(|p| p.trim().parse::<T>()).collect();
            match vals {
                Ok(v) if !v.is_empty() => Ok(Some(v)),
                Ok(_) => bail!("--{name} must not be empty"),
                Err(e) => bail!("parsing --{name} '{s}': {e}"),
            }
        }
    }
}

fn cmd_sweep(args: SweepArgs, json: bool) -> anyhow::Result<()> {
    let setup = resolve_train_setup(&args.common)?;
    let mut grid = SweepGrid::default();
    if let Some(v) = parse_axis::<f64>(&args.learning_rates, "learning-rates")? {
        grid.learning_rates = v;
    }
    if let Some(v) = parse_axis::<usize>(&args.batch_sizes, "batch-sizes")? {
        grid.batch_sizes = v;
    }
    if let Some(v) = parse_axis::<f64>(&args.lr_factors, "lr-factors")? {
        grid.lr_factors = v;
    }

    let backbone = create_backbone(&args.common.backbone, setup.config.seed)?;
    let profile = backbone.profile().clone();
    let vocab_ref = setup.vocab.as_ref().map(|v| (v, &setup.synonyms));
    let data = PreparedDataset::prepare(
        &setup.manifest,
        &profile,
        &setup.images_root,
        vocab_ref,
        &PrepareOptions {
            augment_train: !args.common.no_augment,
            augment_seed: setup.config.seed,
            ..Default::default()
        },
    )?;
    let output_dim = match setup.task {
        TaskKind::Multiclass => setup.manifest.registry().len(),
        TaskKind::Multilabel => setup.vocab.as_ref().expect("validated").len(),
    };

    let backbone_name = args.common.backbone.clone();
    let task = setup.task;
    let result = folktalent::train::sweep(
        &data,
        &setup.config,
        &grid,
        &mut |cfg| {
            let bb = create_backbone(&backbone_name, cfg.seed)?;
            ClassifierModel::new(bb, task, output_dim, cfg.seed)
        },
        &mut |_| Box::new(MonitorScorer),
    )?;

    let rows: Vec<serde_json::Value> = result
        .cells
        .iter()
        .enumerate()
        .map(|(i, cell)| {
            serde_json::json!({
                "learning_rate": cell.config.learning_rate,
                "batch_size": cell.config.batch_size,
                "lr_factor": cell.config.lr_factor,
                "metric": cell.outcome.as_ref().ok(),
                "error": cell.outcome.as_ref().err(),
                "selected": result.selected == Some(i),
            })
        })
        .collect();
    let table = serde_json::json!({ "cells": rows });
    let out = setup.out_dir.join("sweep.json");
    std::fs::write(&out, serde_json::to_string_pretty(&table)?)?;

    if json {
        println!("{table}");
    } else {
        println!("{:>12} {:>10} {:>9} {:>12}", "lr", "batch", "factor", "metric");
        for (i, cell) in result.cells.iter().enumerate() {
            let marker = if result.selected == Some(i) { "  <- selected" } else { "" };
            match &cell.outcome {
                Ok(m) => println!(
                    "{:>12} {:>10} {:>9} {:>12.2}{marker}",
                    cell.config.learning_rate, cell.config.batch_size, cell.config.lr_factor, m
                ),
                Err(e) => println!(
                    "{:>12} {:>10} {:>9} failed: {e}",
                    cell.config.learning_rate, cell.config.batch_size, cell.config.lr_factor
                ),
            }
        }
        println!("table written to {}", out.display());
    }
    if result.selected.is_none() {
        bail!("every sweep cell failed");
    }
    Ok(())
}

/// Loads a base-model checkpoint; the cache identity is the file stem plus a
/// short digest of the file bytes, so retrained weights never hit a stale cache.
fn load_base_model(path: &Path) -> anyhow::Result<(LoadedCheckpoint, String)> {
    require_artifact(path, "checkpoint", "train")?;
    let loaded = load_checkpoint(path)?;
    let bytes = std::fs::read(path)?;
    let digest: String =
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    let name = path.file_name().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
    let stem = name.strip_suffix(".json").unwrap_or(&name);
    let stem = stem.strip_suffix(".ckpt").unwrap_or(stem);
    Ok((loaded, format!("{stem}-{}", &digest[..8])))
}

fn cmd_stack(args: StackArgs, json: bool) -> anyhow::Result<()> {
    if args.models.len() < 2 {
        bail!("--models needs at least two checkpoints");
    }
    require_artifact(&args.manifest, "split manifest", "split")?;
    let manifest = load_manifest(&args.manifest, PathCheck::Skip)?;
    let images_root = args
        .images_root
        .clone()
        .or_else(|| args.manifest.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));

    let file = load_file_config(args.config.as_deref())?;
    let mut rf = RandomForestConfig::default();
    rf.n_estimators = args.n_estimators.or(file.forest.n_estimators).unwrap_or(rf.n_estimators);
    rf.max_depth = args.max_depth.or(file.forest.max_depth).unwrap_or(rf.max_depth);
    rf.min_samples_split =
        args.min_samples_split.or(file.forest.min_samples_split).unwrap_or(rf.min_samples_split);
    rf.seed = args.seed.or(file.seed).unwrap_or(rf.seed);
    rf.validate()?;

    let out_dir = PathBuf::from(&args.out_dir);
    ensure_dir(&out_dir)?;
    let cache_dir = out_dir.join("probcache");
    ensure_dir(&cache_dir)?;

    let mut loaded = Vec::new();
    let mut cache_ids = Vec::new();
    for path in &args.models {
        let (ckpt, cache_id) = load_base_model(path)?;
        let registry = ckpt.label_space.registry()?;
        if registry.classes() != manifest.registry().classes() {
            bail!("checkpoint {} was trained on a different class roster", path.display());
        }
        loaded.push(ckpt);
        cache_ids.push(cache_id);
    }
    let models: Vec<&ClassifierModel> = loaded.iter().map(|l| &l.model).collect();

    let profile = models[0].backbone().profile().clone();
    for m in &models {
        if m.backbone().profile().input_side != profile.input_side {
            bail!("base models disagree on input geometry; stack models with a shared input size");
        }
    }
    let data = PreparedDataset::prepare(
        &manifest,
        &profile,
        &images_root,
        None,
        &PrepareOptions { augment_train: false, ..Default::default() },
    )?;

    let fit_split: Split = args.fit_split.into();
    let split_hash = manifest.split_hash(fit_split);
    let record_ids = data.record_ids(data.indices(fit_split));

    let mut matrices = Vec::new();
    for (i, model) in models.iter().enumerate() {
        let cache_path = cache_dir.join(format!(
            "{}-{}-{}.csv",
            cache_ids[i],
            fit_split.as_str(),
            &split_hash[..8]
        ));
        let matrix = match read_probability_cache(&cache_path) {
            Ok(cache)
                if cache.model_id == cache_ids[i]
                    && cache.split_hash == split_hash
                    && cache.record_ids == record_ids =>
            {
                cache.matrix
            }
            _ => {
                let probs = collect_probabilities(&[*model], &data, fit_split)?.remove(0);
                write_probability_cache(
                    &cache_path,
                    &ProbabilityCache {
                        model_id: cache_ids[i].clone(),
                        split_hash: split_hash.clone(),
                        classes: manifest.registry().classes().to_vec(),
                        record_ids: record_ids.clone(),
                        matrix: probs.clone(),
                    },
                )?;
                probs
            }
        };
        matrices.push(matrix);
    }

    let features = build_stacked_features(&matrices)?;
    let labels = data.class_labels(data.indices(fit_split));

    let chosen_rf = if args.sweep {
        let val_matrices = collect_probabilities(&models, &data, Split::Validation)?;
        let val_features = build_stacked_features(&val_matrices)?;
        let val_labels = data.class_labels(data.indices(Split::Validation));
        let sweep = sweep_meta(
            &features,
            &labels,
            &val_features,
            &val_labels,
            manifest.registry().len(),
            &MetaSweepGrid::default(),
            rf.seed,
        )?;
        let best =
            *sweep.selected_config().ok_or_else(|| anyhow!("every meta-sweep cell failed"))?;
        let rows: Vec<serde_json::Value> = sweep
            .cells
            .iter()
            .map(|c| {
                serde_json::json!({
                    "n_estimators": c.config.n_estimators,
                    "max_depth": c.config.max_depth,
                    "min_samples_split": c.config.min_samples_split,
                    "holdout_accuracy": c.outcome.as_ref().ok(),
                    "error": c.outcome.as_ref().err(),
                })
            })
            .collect();
        std::fs::write(out_dir.join("meta-sweep.json"), serde_json::to_string_pretty(&rows)?)?;
        best
    } else {
        rf
    };

    let meta = fit_meta(&features, &labels, manifest.registry().len(), &chosen_rf)?
        .with_model_order(cache_ids.clone());
    let meta_path = out_dir.join("meta.json");
    meta.save(&meta_path)?;

    if json {
        println!(
            "{}",
            serde_json::json!({
                "meta": meta_path,
                "feature_width": meta.feature_width(),
                "fit_split": fit_split.as_str(),
                "model_order": cache_ids,
                "config": chosen_rf,
            })
        );
    } else {
        println!(
            "meta-classifier fitted on {} ({} rows, width {}) -> {}",
            fit_split.as_str(),
            features.nrows(),
            meta.feature_width(),
            meta_path.display()
        );
    }
    Ok(())
}

enum CliReport {
    Classification(EvaluationReport),
    Tagging { model_id: String, map: MapReport },
}

fn cmd_evaluate(args: EvaluateArgs, json: bool) -> anyhow::Result<()> {
    require_artifact(&args.manifest, "split manifest", "split")?;
    let manifest = load_manifest(&args.manifest, PathCheck::Skip)?;
    let images_root = args
        .images_root
        .clone()
        .or_else(|| args.manifest.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    let split: Split = args.split.into();
    let out_dir = PathBuf::from(&args.out_dir);
    ensure_dir(&out_dir)?;

    let report = match (&args.checkpoint, &args.meta) {
        (Some(ckpt_path), None) => {
            evaluate_checkpoint(&args, ckpt_path, &manifest, &images_root, split)?
        }
        (None, Some(meta_path)) => {
            if args.models.len() < 2 {
                bail!("ensemble evaluation needs --models with the base checkpoints");
            }
            evaluate_ensemble(&args, meta_path, &manifest, &images_root, split)?
        }
        _ => bail!("pass exactly one of --checkpoint or --meta"),
    };

    match report {
        CliReport::Classification(report) => {
            let dest = out_dir.join(format!("eval-{}-{}", report.run.model_id, split.as_str()));
            let emitted = emit_report(&report, &dest)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!(
                    "{} on {}: accuracy {:.2}%",
                    report.run.model_id,
                    split.as_str(),
                    report.overall_accuracy
                );
                if let Some(map) = &report.map {
                    println!(
                        "tagging mAP {:.2}% ({} tags excluded with no positives)",
                        map.map, map.excluded_tags
                    );
                }
                println!("report: {}", emitted.report_json.display());
            }
        }
        CliReport::Tagging { model_id, map } => {
            let dest = out_dir.join(format!("eval-{model_id}-{}", split.as_str()));
            ensure_dir(&dest)?;
            let path = dest.join("tagging_report.json");
            let body = serde_json::json!({
                "schema_version": 1,
                "run": {
                    "model_id": model_id,
                    "split": split.as_str(),
                    "timestamp": now_rfc3339(),
                },
                "map": map.map,
                "excluded_tags": map.excluded_tags,
                "per_tag_ap": map.per_tag_ap,
            });
            std::fs::write(&path, serde_json::to_string_pretty(&body)?)?;
            if json {
                println!("{body}");
            } else {
                println!(
                    "{model_id} on {}: mAP {:.2}% ({} tags excluded)",
                    split.as_str(),
                    map.map,
                    map.excluded_tags
                );
                println!("report: {}", path.display());
            }
        }
    }
    Ok(())
}

fn evaluate_checkpoint(
    args: &EvaluateArgs,
    ckpt_path: &Path,
    manifest: &DatasetManifest,
    images_root: &Path,
    split: Split,
) -> anyhow::Result<CliReport> {
    let (loaded, model_id) = load_base_model(ckpt_path)?;
    let profile = loaded.model.backbone().profile().clone();
    match loaded.model.task() {
        TaskKind::Multiclass => {
            let registry = loaded.label_space.registry()?;
            if registry.classes() != manifest.registry().classes() {
                bail!("checkpoint class roster does not match the manifest");
            }
            let data = PreparedDataset::prepare(
                manifest,
                &profile,
                images_root,
                None,
                &PrepareOptions { augment_train: false, ..Default::default() },
            )?;
            let (preds, truths) = predict_split_classes(&loaded.model, &data, split)?;
            let cm = confusion(&preds, &truths, &registry)?;
            let mut report = EvaluationReport::from_confusion(
                cm,
                RunInfo {
                    model_id,
                    split: split.as_str().into(),
                    seed: args.seed,
                    timestamp: now_rfc3339(),
                },
            );
            if let Some(tagging) = &args.tagging_checkpoint {
                let (tag_ckpt, _) = load_base_model(tagging)?;
                let vocab = tag_ckpt.label_space.vocabulary()?;
                let synonyms = SynonymMap::new();
                let tag_data = PreparedDataset::prepare(
                    manifest,
                    tag_ckpt.model.backbone().profile(),
                    images_root,
                    Some((&vocab, &synonyms)),
                    &PrepareOptions { augment_train: false, ..Default::default() },
                )?;
                let (scores, labels) = score_split_tags(&tag_ckpt.model, &tag_data, split)?;
                report = report.with_map(mean_average_precision(&scores, &labels)?);
            }
            Ok(CliReport::Classification(report))
        }
        TaskKind::Multilabel => {
            let vocab = loaded.label_space.vocabulary()?;
            let synonyms = SynonymMap::new();
            let data = PreparedDataset::prepare(
                manifest,
                &profile,
                images_root,
                Some((&vocab, &synonyms)),
                &PrepareOptions { augment_train: false, ..Default::default() },
            )?;
            let (scores, labels) = score_split_tags(&loaded.model, &data, split)?;
            let map = mean_average_precision(&scores, &labels)?;
            Ok(CliReport::Tagging { model_id, map })
        }
    }
}

fn evaluate_ensemble(
    args: &EvaluateArgs,
    meta_path: &Path,
    manifest: &DatasetManifest,
    images_root: &Path,
    split: Split,
) -> anyhow::Result<CliReport> {
    require_artifact(meta_path, "meta-classifier", "stack")?;
    let meta = MetaClassifier::load(meta_path)?;
    let mut loaded = Vec::new();
    let mut cache_ids = Vec::new();
    for path in &args.models {
        let (ckpt, cache_id) = load_base_model(path)?;
        loaded.push(ckpt);
        cache_ids.push(cache_id);
    }
    if !meta.model_order().is_empty() && meta.model_order() != cache_ids {
        bail!(
            "model order {:?} does not match the fitted order {:?}",
            cache_ids,
            meta.model_order()
        );
    }
    let models: Vec<&ClassifierModel> = loaded.iter().map(|l| &l.model).collect();
    let profile = models[0].backbone().profile().clone();
    let data = PreparedDataset::prepare(
        manifest,
        &profile,
        images_root,
        None,
        &PrepareOptions { augment_train: false, ..Default::default() },
    )?;
    let matrices = collect_probabilities(&models, &data, split)?;
    let features = build_stacked_features(&matrices)?;
    let preds = meta.predict_batch(&features)?;
    let truths = data.class_labels(data.indices(split));
    let cm = confusion(&preds, &truths, manifest.registry())?;
    Ok(CliReport::Classification(EvaluationReport::from_confusion(
        cm,
        RunInfo {
            model_id: "ensemble".into(),
            split: split.as_str().into(),
            seed: args.seed,
            timestamp: now_rfc3339(),
        },
    )))
}

fn cmd_predict(args: PredictArgs, json: bool) -> anyhow::Result<()> {
    let (loaded, _) = load_base_model(&args.checkpoint)?;
    let image = RasterImage::open(&args.image)?;
    let trimmed = trim_border(&image, &TrimPolicy::heuristic_default(), true)?;
    let tensor = resize_normalize(&trimmed, loaded.model.backbone().profile())?;
    match loaded.model.task() {
        TaskKind::Multiclass => {
            let registry = loaded.label_space.registry()?;
            let class = predict_class(&loaded.model, &tensor, &registry)?;
            if json {
                println!("{}", serde_json::json!({ "class": class }));
            } else {
                println!("{class}");
            }
        }
        TaskKind::Multilabel => {
            let vocab = loaded.label_space.vocabulary()?;
            let tags = predict_tags(&loaded.model, &tensor, &vocab, args.threshold)?;
            if json {
                let tags: Vec<&String> = tags.iter().collect();
                println!("{}", serde_json::json!({ "tags": tags }));
            } else {
                println!("{}", tags.iter().map(String::as_str).collect::<Vec<_>>().join(";"));
            }
        }
    }
    Ok(())
}

fn cmd_report(args: ReportArgs, json: bool) -> anyhow::Result<()> {
    if args.inputs.is_empty() {
        bail!("--inputs needs at least one report.json; run `folktalent evaluate` first");
    }
    // model -> split -> accuracy
    let mut table: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for path in &args.inputs {
        let report = load_report(path)?;
        table
            .entry(report.run.model_id.clone())
            .or_default()
            .insert(report.run.split.clone(), report.overall_accuracy);
    }
    let splits = ["train", "validation", "test"];
    if json {
        println!("{}", serde_json::to_string_pretty(&table)?);
    } else {
        println!("{:<24} {:>9} {:>12} {:>9}", "model", "train", "validation", "test");
        for (model, cells) in &table {
            let fmt =
                |s: &str| cells.get(s).map(|a| format!("{a:.2}")).unwrap_or_else(|| "-".into());
            println!(
                "{:<24} {:>9} {:>12} {:>9}",
                model,
                fmt("train"),
                fmt("validation"),
                fmt("test")
            );
        }
    }
    if let Some(out) = &args.out {
        let mut csv = String::from("model,train,validation,test\n");
        for (model, cells) in &table {
            csv.push_str(model);
            for s in splits {
                csv.push(',');
                if let Some(a) = cells.get(s) {
                    csv.push_str(&format!("{a:.2}"));
                }
            }
            csv.push('\n');
        }
        std::fs::write(out, csv)?;
        if !json {
            println!("table written to {}", out.display());
        }
    }
    Ok(())
}

fn cmd_synth_data(args: SynthDataArgs, json: bool) -> anyhow::Result<()> {
    let out = args.out.unwrap_or_else(|| PathBuf::from(&args.out_dir).join("synth"));
    ensure_dir(&out)?;
    let summary = generate(
        &out,
        &SynthConfig {
            per_class: args.per_class,
            image_side: args.size,
            seed: args.seed,
            with_frames: !args.no_frames,
        },
    )?;
    if json {
        println!(
            "{}",
            serde_json::json!({
                "classes": summary.class_names,
                "images": summary.images,
                "manifest": summary.manifest_path,
                "synonyms": summary.synonyms_path,
            })
        );
    } else {
        println!(
            "generated {} images across {} classes under {}",
            summary.images,
            summary.class_names.len(),
            out.display()
        );
        println!("manifest: {}", summary.manifest_path.display());
        println!("synonyms: {}", summary.synonyms_path.display());
    }
    Ok(())
}

//! Fine-tuning loop: Adam, plateau LR reduction, early stopping,
//! best-validation checkpointing, and grid sweeps.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::evaluate::{accuracy, mean_average_precision};
use crate::model::{BatchTargets, ClassifierModel, TaskKind};
use crate::pipeline::{predict_split_classes, score_split_tags, PreparedDataset};

/// Learning-rate options explored by the sweep.
pub const LEARNING_RATE_GRID: [f64; 2] = [0.001, 0.0001];
/// Batch-size options explored by the sweep.
pub const BATCH_SIZE_GRID: [usize; 3] = [32, 64, 128];
/// LR reduction-factor options explored by the sweep.
pub const LR_FACTOR_GRID: [f64; 2] = [0.2, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// Initial Adam learning rate. The tuned winner is 0.001.
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    /// Minibatch size. The tuned winner is 32.
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::max_epochs")]
    pub max_epochs: usize,
    /// Epochs without validation improvement before training halts.
    #[serde(default = "defaults::early_stop_patience")]
    pub early_stop_patience: usize,
    /// Epochs without improvement before the learning rate is reduced.
    #[serde(default = "defaults::lr_patience")]
    pub lr_patience: usize,
    /// Multiplier applied to the learning rate on plateau.
    #[serde(default = "defaults::lr_factor")]
    pub lr_factor: f64,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn learning_rate() -> f64 {
        0.001
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn max_epochs() -> usize {
        100
    }
    pub fn early_stop_patience() -> usize {
        15
    }
    pub fn lr_patience() -> usize {
        8
    }
    pub fn lr_factor() -> f64 {
        0.5
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: defaults::learning_rate(),
            batch_size: defaults::batch_size(),
            max_epochs: defaults::max_epochs(),
            early_stop_patience: defaults::early_stop_patience(),
            lr_patience: defaults::lr_patience(),
            lr_factor: defaults::lr_factor(),
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad("lr_factor must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1");
        }
        if self.early_stop_patience == 0 || self.lr_patience == 0 {
            return bad("patience values must be >= 1");
        }
        Ok(())
    }
}

/// Plateau LR reduction state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulerState {
    pub current_lr: f64,
    pub best_metric: f64,
    pub epochs_since_improvement: usize,
}

impl SchedulerState {
    pub fn new(initial_lr: f64) -> Self {
        SchedulerState {
            current_lr: initial_lr,
            best_metric: f64::NEG_INFINITY,
            epochs_since_improvement: 0,
        }
    }
}

/// One scheduler transition. Improvement (strictly greater metric) resets
/// the counter; when the counter reaches `patience` the learning rate is
/// multiplied by `factor` and the counter resets.
pub fn scheduler_step(
    state: SchedulerState,
    metric: f64,
    patience: usize,
    factor: f64,
) -> SchedulerState {
    let mut next = state;
    if metric > next.best_metric {
        next.best_metric = metric;
        next.epochs_since_improvement = 0;
    } else {
        next.epochs_since_improvement += 1;
        if next.epochs_since_improvement >= patience {
            next.current_lr *= factor;
            next.epochs_since_improvement = 0;
        }
    }
    next
}

/// Early-stopping state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopState {
    pub best_metric: f64,
    pub epochs_since_improvement: usize,
    pub stopped: bool,
}

impl EarlyStopState {
    pub fn new() -> Self {
        EarlyStopState {
            best_metric: f64::NEG_INFINITY,
            epochs_since_improvement: 0,
            stopped: false,
        }
    }
}

impl Default for EarlyStopState {
    fn default() -> Self {
        Self::new()
    }
}

/// One early-stop transition; `stopped` flips the epoch the counter reaches
/// `patience`.
pub fn early_stop_step(state: EarlyStopState, metric: f64, patience: usize) -> EarlyStopState {
    let mut next = state;
    if metric > next.best_metric {
        next.best_metric = metric;
        next.epochs_since_improvement = 0;
    } else {
        next.epochs_since_improvement += 1;
    }
    next.stopped = next.epochs_since_improvement >= patience;
    next
}

/// Per-epoch log record (1-based epochs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub validation_metric: f64,
    /// Learning rate in effect during this epoch.
    pub learning_rate: f64,
}

/// Best-so-far model snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<f64>,
    pub metrics: EpochMetrics,
}

/// Outcome of one training run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochMetrics>,
    /// Name of the monitored validation metric.
    pub monitor: String,
}

/// Produces the monitored validation metric each epoch.
///
/// The production scorer computes validation accuracy (multi-class) or
/// validation mAP (multi-label); scripted scorers drive the scheduler and
/// stopping logic in tests without real training signal.
pub trait ValidationScorer {
    fn name(&self) -> &str;
    fn score(
        &mut self,
        epoch: usize,
        model: &ClassifierModel,
        data: &PreparedDataset,
    ) -> Result<f64>;
}

/// Validation accuracy for multi-class models, validation mAP for
/// multi-label models, both as percentages.
pub struct MonitorScorer;

impl ValidationScorer for MonitorScorer {
    fn name(&self) -> &str {
        "validation_metric"
    }

    fn score(
        &mut self,
        _epoch: usize,
        model: &ClassifierModel,
        data: &PreparedDataset,
    ) -> Result<f64> {
        match model.task() {
            TaskKind::Multiclass => {
                let (preds, truths) = predict_split_classes(model, data, Split::Validation)?;
                accuracy(&preds, &truths)
            }
            TaskKind::Multilabel => {
                let (scores, labels) = score_split_tags(model, data, Split::Validation)?;
                Ok(mean_average_precision(&scores, &labels)?.map)
            }
        }
    }
}

/// Emits a fixed metric sequence, repeating the final value when exhausted.
pub struct ScriptedScorer {
    values: Vec<f64>,
    cursor: usize,
}

impl ScriptedScorer {
    pub fn new(values: Vec<f64>) -> Self {
        ScriptedScorer { values, cursor: 0 }
    }
}

impl ValidationScorer for ScriptedScorer {
    fn name(&self) -> &str {
        "scripted"
    }

    fn score(&mut self, _: usize, _: &ClassifierModel, _: &PreparedDataset) -> Result<f64> {
        let v = self
            .values
            .get(self.cursor)
            .or_else(|| self.values.last())
            .copied()
            .unwrap_or(0.0);
        self.cursor += 1;
        Ok(v)
    }
}

/// Adam optimizer state (decoupled from any model).
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    /// Published defaults: beta1 0.9, beta2 0.999, epsilon 1e-8.
    pub fn new(dim: usize) -> Self {
        Adam { m: vec![0.0; dim], v: vec![0.0; dim], t: 0, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// Fine-tunes the model on the train split, monitoring the validation split.
///
/// Per epoch: seeded shuffle, minibatch Adam steps on CE/BCE, validation
/// scoring, plateau LR reduction, early stopping, and best-metric
/// checkpointing. The scheduler and stopper track improvements
/// independently. Deterministic for fixed `(model seed, data, config)`.
pub fn train(
    model: &mut ClassifierModel,
    data: &PreparedDataset,
    config: &TrainingConfig,
    scorer: &mut dyn ValidationScorer,
) -> Result<TrainRun> {
    config.validate()?;
    let train_indices = data.indices(Split::Train);
    if train_indices.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if data.indices(Split::Validation).is_empty() {
        return Err(Error::EmptySplit("validation".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = model.parameters();
    let mut adam = Adam::new(params.len());
    let mut scheduler = SchedulerState::new(config.learning_rate);
    let mut stopper = EarlyStopState::new();
    let mut log: Vec<EpochMetrics> = Vec::new();
    let mut best: Option<Checkpoint> = None;

    let mut order: Vec<usize> = train_indices.to_vec();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let lr_in_effect = scheduler.current_lr;

        let mut loss_sum = 0.0;
        let mut correct_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let tensors = data.tensors(chunk)?;
            let class_labels;
            let tag_rows;
            let targets = match model.task() {
                TaskKind::Multiclass => {
                    class_labels = data.class_labels(chunk);
                    BatchTargets::Classes(&class_labels)
                }
                TaskKind::Multilabel => {
                    tag_rows = data.tag_rows(chunk)?;
                    BatchTargets::Tags(&tag_rows)
                }
            };
            let batch = model.loss_and_gradient(&tensors, &targets)?;
            if !batch.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            loss_sum += batch.loss * chunk.len() as f64;
            correct_sum += batch.correct;
            adam.step(&mut params, &batch.gradient, lr_in_effect);
            model.set_parameters(&params)?;
        }

        let validation_metric = scorer.score(epoch, model, data)?;
        if !validation_metric.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }

        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            train_accuracy: 100.0 * correct_sum / order.len() as f64,
            validation_metric,
            learning_rate: lr_in_effect,
        };
        let improved = best
            .as_ref()
            .map(|b| validation_metric > b.metrics.validation_metric)
            .unwrap_or(true);
        if improved {
            best = Some(Checkpoint { params: params.clone(), metrics: metrics.clone() });
        }
        log.push(metrics);

        scheduler = scheduler_step(scheduler, validation_metric, config.lr_patience, config.lr_factor);
        stopper = early_stop_step(stopper, validation_metric, config.early_stop_patience);
        if stopper.stopped {
            break;
        }
    }

    Ok(TrainRun {
        checkpoint: best.expect("at least one epoch ran"),
        log,
        monitor: scorer.name().to_string(),
    })
}

/// Writes the run log as line-delimited JSON records.
pub fn write_run_log(log: &[EpochMetrics], path: &std::path::Path) -> Result<()> {
    let mut out = String::new();
    for m in log {
        out.push_str(
            &serde_json::to_string(m).map_err(|e| Error::format(path, e.to_string()))?,
        );
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Axes of the hyperparameter sweep (Cartesian product).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub lr_factors: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            learning_rates: LEARNING_RATE_GRID.to_vec(),
            batch_sizes: BATCH_SIZE_GRID.to_vec(),
            lr_factors: LR_FACTOR_GRID.to_vec(),
        }
    }
}

/// One sweep cell: the config tried and its best validation metric (or the
/// error that cell produced).
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub config: TrainingConfig,
    pub outcome: std::result::Result<f64, String>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    /// Index of the winning cell, if any cell succeeded.
    pub selected: Option<usize>,
}

impl SweepResult {
    pub fn selected_config(&self) -> Option<&TrainingConfig> {
        self.selected.map(|i| &self.cells[i].config)
    }
}

/// Runs one training per grid cell and selects the best validation metric.
/// Ties break to the lowest learning rate, then the smallest batch size,
/// then the smallest factor. Per-cell failures are recorded, not fatal.
pub fn sweep(
    data: &PreparedDataset,
    base: &TrainingConfig,
    grid: &SweepGrid,
    model_factory: &mut dyn FnMut(&TrainingConfig) -> Result<ClassifierModel>,
    scorer_factory: &mut dyn FnMut(&TrainingConfig) -> Box<dyn ValidationScorer>,
) -> Result<SweepResult> {
    if grid.learning_rates.is_empty() || grid.batch_sizes.is_empty() || grid.lr_factors.is_empty()
    {
        return Err(Error::EmptyInput("sweep grid has an empty axis".into()));
    }
    let mut cells = Vec::new();
    for &lr in &grid.learning_rates {
        for &batch in &grid.batch_sizes {
            for &factor in &grid.lr_factors {
                let config = TrainingConfig {
                    learning_rate: lr,
                    batch_size: batch,
                    lr_factor: factor,
                    ..base.clone()
                };
                let outcome = (|| -> Result<f64> {
                    let mut model = model_factory(&config)?;
                    let mut scorer = scorer_factory(&config);
                    let run = train(&mut model, data, &config, scorer.as_mut())?;
                    Ok(run.checkpoint.metrics.validation_metric)
                })()
                .map_err(|e| e.to_string());
                cells.push(SweepCell { config, outcome });
            }
        }
    }

    let mut selected: Option<usize> = None;
    for (i, cell) in cells.iter().enumerate() {
        let Some(metric) = cell.outcome.as_ref().ok().copied() else { continue };
        let better = match selected {
            None => true,
            Some(j) => {
                let best = cells[j].outcome.as_ref().copied().unwrap();
                let c = &cell.config;
                let b = &cells[j].config;
                metric > best
                    || (metric == best
                        && (c.learning_rate, c.batch_size, c.lr_factor)
                            < (b.learning_rate, b.batch_size, b.lr_factor))
            }
        };
        if better {
            selected = Some(i);
        }
    }
    Ok(SweepResult { cells, selected })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClassifierModel, TinyPatchBackbone};
    use crate::pipeline::PreparedItem;
    use crate::preprocess::{BackboneProfile, RasterImage};
    use approx::assert_abs_diff_eq;

    fn probe_profile() -> BackboneProfile {
        BackboneProfile::new("tiny-patch-2", 16, [0.5; 3], [0.5; 3], 64).unwrap()
    }

    /// Two visually separable classes: dark red-ish vs bright blue-ish, with
    /// mild per-image shade variation.
    pub(crate) fn separable_dataset(per_class: usize) -> PreparedDataset {
        let mut items = Vec::new();
        let mut train = Vec::new();
        let mut validation = Vec::new();
        for class in 0..2usize {
            for k in 0..per_class {
                let jitter = (k * 9 % 32) as u8;
                let rgb = if class == 0 {
                    [90 + jitter, 20, 30]
                } else {
                    [20, 40 + jitter, 200]
                };
                let img = RasterImage::filled(16, 16, rgb).unwrap();
                let idx = items.len();
                items.push(PreparedItem::new(format!("c{class}-{k}"), img, class, None));
                if k % 4 == 3 {
                    validation.push(idx);
                } else {
                    train.push(idx);
                }
            }
        }
        PreparedDataset::from_parts(probe_profile(), items, train, validation, vec![]).unwrap()
    }

    pub(crate) fn separable_model(seed: u64) -> ClassifierModel {
        let backbone = TinyPatchBackbone::new(2, 16, true, seed).unwrap();
        ClassifierModel::new(Box::new(backbone), TaskKind::Multiclass, 2, seed + 1).unwrap()
    }

    #[test]
    fn scheduler_halves_after_eight_flat_epochs() {
        let mut s = SchedulerState::new(0.001);
        s = scheduler_step(s, 10.0, 8, 0.5);
        for _ in 0..7 {
            s = scheduler_step(s, 10.0, 8, 0.5);
            assert_abs_diff_eq!(s.current_lr, 0.001);
        }
        s = scheduler_step(s, 10.0, 8, 0.5);
        assert_abs_diff_eq!(s.current_lr, 0.0005);
        assert_eq!(s.epochs_since_improvement, 0);
        // Eight more flat epochs: a second halving.
        for _ in 0..8 {
            s = scheduler_step(s, 10.0, 8, 0.5);
        }
        assert_abs_diff_eq!(s.current_lr, 0.00025);
    }

    #[test]
    fn scheduler_keeps_lr_while_improving() {
        let mut s = SchedulerState::new(0.001);
        for metric in [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0] {
            s = scheduler_step(s, metric, 8, 0.5);
        }
        assert_abs_diff_eq!(s.current_lr, 0.001);
        assert_eq!(s.epochs_since_improvement, 0);
    }

    #[test]
    fn scheduler_lr_is_initial_times_factor_power() {
        let mut s = SchedulerState::new(0.01);
        let mut halvings = 0u32;
        for i in 0..50 {
            let metric = if i % 11 == 0 { 100.0 + i as f64 } else { 0.0 };
            let before = s.current_lr;
            s = scheduler_step(s, metric, 3, 0.2);
            if s.current_lr < before {
                halvings += 1;
            }
            assert_abs_diff_eq!(s.current_lr, 0.01 * 0.2f64.powi(halvings as i32), epsilon = 1e-15);
        }
        assert!(halvings > 0);
    }

    #[test]
    fn early_stop_triggers_at_patience() {
        let mut s = EarlyStopState::new();
        s = early_stop_step(s, 5.0, 15);
        for i in 0..14 {
            s = early_stop_step(s, 4.0, 15);
            assert!(!s.stopped, "stopped early at flat epoch {}", i + 1);
        }
        s = early_stop_step(s, 4.0, 15);
        assert!(s.stopped);
    }

    #[test]
    fn early_stop_never_fires_with_alternating_improvement() {
        let mut s = EarlyStopState::new();
        let mut metric = 1.0;
        for i in 0..100 {
            let m = if i % 2 == 0 {
                metric += 1.0;
                metric
            } else {
                metric - 0.5
            };
            s = early_stop_step(s, m, 15);
            assert!(!s.stopped);
        }
    }

    #[test]
    fn improvement_resets_the_early_stop_counter() {
        let mut s = EarlyStopState::new();
        s = early_stop_step(s, 5.0, 15);
        for _ in 0..14 {
            s = early_stop_step(s, 4.0, 15);
        }
        assert_eq!(s.epochs_since_improvement, 14);
        s = early_stop_step(s, 6.0, 15);
        assert_eq!(s.epochs_since_improvement, 0);
        assert!(!s.stopped);
    }

    #[test]
    fn scripted_run_stops_at_one_plus_patience() {
        let data = separable_dataset(8);
        let mut model = separable_model(3);
        let config = TrainingConfig {
            max_epochs: 100,
            batch_size: 8,
            ..Default::default()
        };
        // Improves at epoch 1, never again.
        let mut scorer = ScriptedScorer::new(vec![10.0, 5.0]);
        let run = train(&mut model, &data, &config, &mut scorer).unwrap();
        assert_eq!(run.log.len(), 16);
        assert_eq!(run.checkpoint.metrics.epoch, 1);
    }

    #[test]
    fn scripted_lr_schedule_shows_two_halvings() {
        let data = separable_dataset(8);
        let mut model = separable_model(3);
        let config = TrainingConfig {
            max_epochs: 18,
            batch_size: 8,
            early_stop_patience: 40,
            ..Default::default()
        };
        let mut scorer = ScriptedScorer::new(vec![10.0, 5.0]);
        let run = train(&mut model, &data, &config, &mut scorer).unwrap();
        // Epoch 1 improves; epochs 2..=9 flatten -> lr halves entering 10;
        // epochs 10..=17 flatten -> lr quarters entering 18.
        assert_abs_diff_eq!(run.log[0].learning_rate, 0.001);
        assert_abs_diff_eq!(run.log[9].learning_rate, 0.0005);
        assert_abs_diff_eq!(run.log[17].learning_rate, 0.00025);
    }

    #[test]
    fn checkpoint_tracks_the_running_maximum() {
        let data = separable_dataset(8);
        let mut model = separable_model(3);
        let config = TrainingConfig {
            max_epochs: 9,
            batch_size: 8,
            ..Default::default()
        };
        let script = vec![3.0, 7.0, 2.0, 7.0, 1.0, 9.5, 4.0, 9.5, 0.0];
        let mut scorer = ScriptedScorer::new(script.clone());
        let run = train(&mut model, &data, &config, &mut scorer).unwrap();
        assert_eq!(run.log.len(), 9);
        let max = script.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_abs_diff_eq!(run.checkpoint.metrics.validation_metric, max);
        assert_eq!(run.checkpoint.metrics.epoch, 6);
        // Running-max property across the whole log.
        let mut running = f64::NEG_INFINITY;
        for m in &run.log {
            running = running.max(m.validation_metric);
        }
        assert_abs_diff_eq!(run.checkpoint.metrics.validation_metric, running);
    }

    #[test]
    fn separable_task_overfits_quickly() {
        let data = separable_dataset(8);
        let mut model = separable_model(5);
        let config = TrainingConfig {
            max_epochs: 20,
            batch_size: 4,
            ..Default::default()
        };
        let run = train(&mut model, &data, &config, &mut MonitorScorer).unwrap();
        let last = run.log.last().unwrap();
        assert!(
            run.log.iter().any(|m| m.train_accuracy >= 95.0),
            "train accuracy never reached 95%: {:?}",
            run.log.iter().map(|m| m.train_accuracy).collect::<Vec<_>>()
        );
        // Loss drops over the first epochs.
        assert!(run.log[4].train_loss < run.log[0].train_loss);
        assert!(last.validation_metric >= 50.0);
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let data = separable_dataset(6);
        let config = TrainingConfig { max_epochs: 4, batch_size: 4, ..Default::default() };
        let mut a = separable_model(9);
        let mut b = separable_model(9);
        let run_a = train(&mut a, &data, &config, &mut MonitorScorer).unwrap();
        let run_b = train(&mut b, &data, &config, &mut MonitorScorer).unwrap();
        assert_eq!(run_a.log, run_b.log);
        assert_eq!(run_a.checkpoint.params, run_b.checkpoint.params);
    }

    #[test]
    fn empty_split_is_rejected() {
        let profile = probe_profile();
        let img = RasterImage::filled(16, 16, [1, 1, 1]).unwrap();
        let items = vec![PreparedItem::new("only", img, 0, None)];
        let data =
            PreparedDataset::from_parts(profile, items, vec![0], vec![], vec![]).unwrap();
        let mut model = separable_model(1);
        let err = train(&mut model, &data, &Default::default(), &mut MonitorScorer).unwrap_err();
        assert!(matches!(err, Error::EmptySplit(_)));
    }

    #[test]
    fn non_finite_metric_aborts_with_epoch() {
        let data = separable_dataset(6);
        let mut model = separable_model(2);
        let config = TrainingConfig { max_epochs: 3, batch_size: 4, ..Default::default() };
        let mut scorer = ScriptedScorer::new(vec![1.0, f64::NAN]);
        match train(&mut model, &data, &config, &mut scorer) {
            Err(Error::NonFiniteLoss { epoch }) => assert_eq!(epoch, 2),
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn full_grid_has_twelve_cells() {
        let data = separable_dataset(6);
        let base = TrainingConfig { max_epochs: 1, ..Default::default() };
        let mut counter = 0u64;
        let result = sweep(
            &data,
            &base,
            &SweepGrid::default(),
            &mut |_| {
                counter += 1;
                Ok(separable_model(counter))
            },
            &mut |_| Box::new(ScriptedScorer::new(vec![1.0])),
        )
        .unwrap();
        assert_eq!(result.cells.len(), 12);
        assert!(result.selected.is_some());
    }

    #[test]
    fn single_cell_grid_selects_that_cell() {
        let data = separable_dataset(6);
        let base = TrainingConfig { max_epochs: 1, ..Default::default() };
        let grid = SweepGrid {
            learning_rates: vec![0.001],
            batch_sizes: vec![32],
            lr_factors: vec![0.5],
        };
        let result = sweep(
            &data,
            &base,
            &grid,
            &mut |_| Ok(separable_model(1)),
            &mut |_| Box::new(ScriptedScorer::new(vec![4.0])),
        )
        .unwrap();
        assert_eq!(result.selected, Some(0));
    }

    #[test]
    fn ties_select_lowest_lr_then_smallest_batch() {
        let data = separable_dataset(6);
        let base = TrainingConfig { max_epochs: 1, ..Default::default() };
        let grid = SweepGrid {
            learning_rates: vec![0.001, 0.0001],
            batch_sizes: vec![64, 32],
            lr_factors: vec![0.5],
        };
        // Every cell returns the same metric.
        let result = sweep(
            &data,
            &base,
            &grid,
            &mut |_| Ok(separable_model(1)),
            &mut |_| Box::new(ScriptedScorer::new(vec![7.0])),
        )
        .unwrap();
        let best = result.selected_config().unwrap();
        assert_abs_diff_eq!(best.learning_rate, 0.0001);
        assert_eq!(best.batch_size, 32);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            /// current_lr never increases and always equals
            /// initial_lr * factor^k for an integer k.
            #[test]
            fn scheduler_lr_is_monotone_and_a_factor_power(
                metrics in proptest::collection::vec(0.0f64..100.0, 1..60),
                patience in 1usize..6,
                factor_step in 1u32..9,
            ) {
                let factor = factor_step as f64 / 10.0;
                let initial = 0.001;
                let mut state = SchedulerState::new(initial);
                let mut previous = state.current_lr;
                for &m in &metrics {
                    state = scheduler_step(state, m, patience, factor);
                    prop_assert!(state.current_lr <= previous);
                    let k = (state.current_lr / initial).log(factor).round();
                    let reconstructed = initial * factor.powi(k as i32);
                    prop_assert!(
                        (state.current_lr - reconstructed).abs() <= 1e-12 * initial,
                        "lr {} is not initial * {factor}^k",
                        state.current_lr
                    );
                    previous = state.current_lr;
                }
            }

            /// A full run never exceeds last-improvement + patience epochs.
            #[test]
            fn run_length_respects_the_early_stop_bound(
                script in proptest::collection::vec(0.0f64..10.0, 1..40),
                patience in 1usize..6,
            ) {
                let data = separable_dataset(6);
                let mut model = separable_model(4);
                let config = TrainingConfig {
                    max_epochs: 40,
                    batch_size: 8,
                    early_stop_patience: patience,
                    ..Default::default()
                };
                let mut scorer = ScriptedScorer::new(script);
                let run = train(&mut model, &data, &config, &mut scorer).unwrap();

                let mut best = f64::NEG_INFINITY;
                let mut last_improvement = 0usize;
                for m in &run.log {
                    if m.validation_metric > best {
                        best = m.validation_metric;
                        last_improvement = m.epoch;
                    }
                }
                prop_assert!(run.log.len() <= config.max_epochs);
                prop_assert!(run.log.len() <= last_improvement + patience);
                prop_assert_eq!(run.checkpoint.metrics.epoch, last_improvement);
                prop_assert_eq!(run.checkpoint.metrics.validation_metric, best);
            }
        }
    }

    #[test]
    fn per_cell_failures_do_not_abort_the_sweep() {
        let data = separable_dataset(6);
        let base = TrainingConfig { max_epochs: 1, ..Default::default() };
        let grid = SweepGrid {
            learning_rates: vec![0.001],
            batch_sizes: vec![16, 32],
            lr_factors: vec![0.5],
        };
        let mut first = true;
        let result = sweep(
            &data,
            &base,
            &grid,
            &mut |_| {
                if first {
                    first = false;
                    Err(Error::InvalidConfig("synthetic failure".into()))
                } else {
                    Ok(separable_model(1))
                }
            },
            &mut |_| Box::new(ScriptedScorer::new(vec![2.0])),
        )
        .unwrap();
        assert!(result.cells[0].outcome.is_err());
        assert_eq!(result.selected, Some(1));
    }
}

//! Stacking ensemble: concatenated base-model probabilities fed into a
//! Random-Forest meta-classifier.

mod forest;

pub use forest::{DecisionTree, RandomForest};

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassRegistry, Split};
use crate::error::{Error, Result};
use crate::model::{ClassifierModel, TaskKind};
use crate::pipeline::PreparedDataset;
use crate::preprocess::NormalizedTensor;

/// Estimator-count options explored by the meta sweep.
pub const N_ESTIMATORS_GRID: [usize; 5] = [100, 200, 400, 800, 1000];
/// Depth options explored by the meta sweep.
pub const MAX_DEPTH_GRID: [usize; 4] = [10, 25, 35, 50];
/// Minimum-samples-per-split options explored by the meta sweep.
pub const MIN_SAMPLES_SPLIT_GRID: [usize; 4] = [2, 4, 8, 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomForestConfig {
    /// Number of trees. The tuned winner is 100.
    #[serde(default = "defaults::n_estimators")]
    pub n_estimators: usize,
    /// Maximum tree depth. The tuned winner is 25.
    #[serde(default = "defaults::max_depth")]
    pub max_depth: usize,
    /// Minimum samples required to split a node. The tuned winner is 8.
    #[serde(default = "defaults::min_samples_split")]
    pub min_samples_split: usize,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn n_estimators() -> usize {
        100
    }
    pub fn max_depth() -> usize {
        25
    }
    pub fn min_samples_split() -> usize {
        8
    }
}

impl Default for RandomForestConfig {
    fn default() -> Self {
        RandomForestConfig {
            n_estimators: defaults::n_estimators(),
            max_depth: defaults::max_depth(),
            min_samples_split: defaults::min_samples_split(),
            seed: 0,
        }
    }
}

impl RandomForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_estimators == 0 || self.max_depth == 0 {
            return Err(Error::InvalidConfig("n_estimators and max_depth must be positive".into()));
        }
        if self.min_samples_split < 2 {
            return Err(Error::InvalidConfig("min_samples_split must be >= 2".into()));
        }
        Ok(())
    }
}

/// Checks that base models agree on task and class count.
fn check_models(models: &[&ClassifierModel]) -> Result<usize> {
    if models.is_empty() {
        return Err(Error::EmptyInput("no base models".into()));
    }
    let classes = models[0].output_dim();
    for m in models.iter() {
        if m.task() != TaskKind::Multiclass {
            return Err(Error::RegistryMismatch("base models must be multi-class".into()));
        }
        if m.output_dim() != classes {
            return Err(Error::RegistryMismatch(format!(
                "models output {} and {} classes",
                classes,
                m.output_dim()
            )));
        }
    }
    Ok(classes)
}

/// Per-model probability matrices over one split, rows in split order.
pub fn collect_probabilities(
    models: &[&ClassifierModel],
    data: &PreparedDataset,
    split: Split,
) -> Result<Vec<Array2<f64>>> {
    check_models(models)?;
    let indices = data.indices(split);
    if indices.is_empty() {
        return Err(Error::EmptySplit(split.as_str().into()));
    }
    let mut out = Vec::with_capacity(models.len());
    for model in models {
        let mut rows = Vec::with_capacity(indices.len() * model.output_dim());
        for chunk in indices.chunks(64) {
            let tensors = data.tensors(chunk)?;
            let probs = model.forward(&tensors)?;
            rows.extend(probs.iter().copied());
        }
        out.push(
            Array2::from_shape_vec((indices.len(), model.output_dim()), rows)
                .map_err(|e| Error::ShapeMismatch(e.to_string()))?,
        );
    }
    Ok(out)
}

/// Row-wise concatenation of per-model probability matrices, in model-list
/// order. Output width is `n_models * n_classes`. Every input row must be
/// stochastic (sum 1 within 1e-6), which catches corrupted caches before
/// they reach the forest.
pub fn build_stacked_features(per_model: &[Array2<f64>]) -> Result<Array2<f64>> {
    if per_model.is_empty() {
        return Err(Error::EmptyInput("no probability matrices".into()));
    }
    let rows = per_model[0].nrows();
    let classes = per_model[0].ncols();
    for m in per_model {
        if m.nrows() != rows || m.ncols() != classes {
            return Err(Error::ShapeMismatch(format!(
                "matrix {:?} does not match ({rows}, {classes})",
                m.dim()
            )));
        }
    }
    for (k, m) in per_model.iter().enumerate() {
        for (r, row) in m.rows().into_iter().enumerate() {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidLabel(format!(
                    "probability row {r} of model {k} sums to {sum}, not 1"
                )));
            }
        }
    }
    let width = per_model.len() * classes;
    let mut stacked = Array2::<f64>::zeros((rows, width));
    for (k, m) in per_model.iter().enumerate() {
        for r in 0..rows {
            for c in 0..classes {
                stacked[[r, k * classes + c]] = m[[r, c]];
            }
        }
    }
    Ok(stacked)
}

/// Fitted meta-classifier plus the contracts it was fitted under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaClassifier {
    forest: RandomForest,
    config: RandomForestConfig,
    feature_width: usize,
    n_classes: usize,
    /// Base-model identifiers in stacking order; empty when unknown.
    model_order: Vec<String>,
}

impl MetaClassifier {
    pub fn feature_width(&self) -> usize {
        self.feature_width
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn config(&self) -> &RandomForestConfig {
        &self.config
    }

    pub fn model_order(&self) -> &[String] {
        &self.model_order
    }

    /// Records the stacking order so it is serialized with the model.
    pub fn with_model_order(mut self, order: Vec<String>) -> Self {
        self.model_order = order;
        self
    }

    /// Vote-fraction probabilities for one stacked row.
    pub fn predict_proba(&self, stacked_row: &[f64]) -> Result<Vec<f64>> {
        let row = ndarray::ArrayView1::from(stacked_row);
        self.forest.predict_proba(row)
    }

    pub fn predict(&self, stacked_row: &[f64]) -> Result<usize> {
        let row = ndarray::ArrayView1::from(stacked_row);
        self.forest.predict(row)
    }

    pub fn predict_batch(&self, stacked: &Array2<f64>) -> Result<Vec<usize>> {
        if stacked.ncols() != self.feature_width {
            return Err(Error::FeatureWidthMismatch {
                got: stacked.ncols(),
                expected: self.feature_width,
            });
        }
        self.forest.predict_batch(stacked)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::format(path, format!("serializing meta-classifier: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact {
                artifact: "meta-classifier".into(),
                path: path.to_path_buf(),
                command: "stack".into(),
            },
            _ => Error::io(format!("reading {}", path.display()), e),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Fits the Random-Forest meta-classifier on stacked probability rows.
pub fn fit_meta(
    features: &Array2<f64>,
    labels: &[usize],
    n_classes: usize,
    config: &RandomForestConfig,
) -> Result<MetaClassifier> {
    if features.nrows() == 0 {
        return Err(Error::EmptyInput("no stacked rows".into()));
    }
    let forest = RandomForest::fit(features, labels, n_classes, config)?;
    Ok(MetaClassifier {
        forest,
        config: *config,
        feature_width: features.ncols(),
        n_classes,
        model_order: Vec::new(),
    })
}

/// Full inference path: base-model probabilities, stacking, forest vote,
/// class name. The model list must match fit-time order.
pub fn predict_ensemble(
    meta: &MetaClassifier,
    models: &[&ClassifierModel],
    image: &NormalizedTensor,
    registry: &ClassRegistry,
) -> Result<String> {
    let classes = check_models(models)?;
    if registry.len() != classes {
        return Err(Error::RegistryMismatch(format!(
            "registry has {} classes, models output {classes}",
            registry.len()
        )));
    }
    let width = models.len() * classes;
    if width != meta.feature_width {
        return Err(Error::FeatureWidthMismatch { got: width, expected: meta.feature_width });
    }
    if !meta.model_order.is_empty() {
        let ids: Vec<String> =
            models.iter().map(|m| m.backbone().identifier().to_string()).collect();
        if ids != meta.model_order {
            return Err(Error::RegistryMismatch(format!(
                "model order {ids:?} does not match fit-time order {:?}",
                meta.model_order
            )));
        }
    }
    let mut stacked = Vec::with_capacity(width);
    for model in models {
        stacked.extend(model.forward_single(image)?.values().iter().copied());
    }
    let class = meta.predict(&stacked)?;
    registry
        .class_at(class)
        .map(str::to_string)
        .ok_or(Error::ClassIndexOutOfRange { index: class, classes: registry.len() })
}

/// One meta-sweep cell.
#[derive(Debug, Clone)]
pub struct MetaSweepCell {
    pub config: RandomForestConfig,
    pub outcome: std::result::Result<f64, String>,
}

#[derive(Debug, Clone)]
pub struct MetaSweepResult {
    pub cells: Vec<MetaSweepCell>,
    pub selected: Option<usize>,
}

impl MetaSweepResult {
    pub fn selected_config(&self) -> Option<&RandomForestConfig> {
        self.selected.map(|i| &self.cells[i].config)
    }
}

/// Axes of the meta-classifier sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaSweepGrid {
    pub n_estimators: Vec<usize>,
    pub max_depths: Vec<usize>,
    pub min_samples_splits: Vec<usize>,
}

impl Default for MetaSweepGrid {
    fn default() -> Self {
        MetaSweepGrid {
            n_estimators: N_ESTIMATORS_GRID.to_vec(),
            max_depths: MAX_DEPTH_GRID.to_vec(),
            min_samples_splits: MIN_SAMPLES_SPLIT_GRID.to_vec(),
        }
    }
}

/// Cartesian sweep over forest hyperparameters, selecting the best held-out
/// accuracy. Ties break to the fewest estimators, then the smallest depth,
/// then the smallest split threshold. Per-cell failures are recorded.
pub fn sweep_meta(
    fit_features: &Array2<f64>,
    fit_labels: &[usize],
    holdout_features: &Array2<f64>,
    holdout_labels: &[usize],
    n_classes: usize,
    grid: &MetaSweepGrid,
    seed: u64,
) -> Result<MetaSweepResult> {
    if grid.n_estimators.is_empty() || grid.max_depths.is_empty() || grid.min_samples_splits.is_empty() {
        return Err(Error::EmptyInput("meta sweep grid has an empty axis".into()));
    }
    let mut cells = Vec::new();
    for &n_estimators in &grid.n_estimators {
        for &max_depth in &grid.max_depths {
            for &min_samples_split in &grid.min_samples_splits {
                let config =
                    RandomForestConfig { n_estimators, max_depth, min_samples_split, seed };
                let outcome = (|| -> Result<f64> {
                    let meta = fit_meta(fit_features, fit_labels, n_classes, &config)?;
                    let preds = meta.predict_batch(holdout_features)?;
                    crate::evaluate::accuracy(&preds, holdout_labels)
                })()
                .map_err(|e| e.to_string());
                cells.push(MetaSweepCell { config, outcome });
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
                        && (c.n_estimators, c.max_depth, c.min_samples_split)
                            < (b.n_estimators, b.max_depth, b.min_samples_split))
            }
        };
        if better {
            selected = Some(i);
        }
    }
    Ok(MetaSweepResult { cells, selected })
}

/// On-disk probability matrix with its provenance header.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityCache {
    pub model_id: String,
    pub split_hash: String,
    pub classes: Vec<String>,
    pub record_ids: Vec<String>,
    pub matrix: Array2<f64>,
}

/// Writes a probability matrix keyed by `(model id, split hash)`.
/// Byte-identical for identical inputs.
pub fn write_probability_cache(path: &Path, cache: &ProbabilityCache) -> Result<()> {
    if cache.record_ids.len() != cache.matrix.nrows()
        || cache.classes.len() != cache.matrix.ncols()
    {
        return Err(Error::ShapeMismatch(format!(
            "{} ids / {} classes vs matrix {:?}",
            cache.record_ids.len(),
            cache.classes.len(),
            cache.matrix.dim()
        )));
    }
    let mut out = String::new();
    out.push_str(&format!("# model_id={}\n", cache.model_id));
    out.push_str(&format!("# split_hash={}\n", cache.split_hash));
    out.push_str(&format!("# classes={}\n", cache.classes.join(";")));
    for (i, id) in cache.record_ids.iter().enumerate() {
        out.push_str(id);
        for c in 0..cache.matrix.ncols() {
            out.push(',');
            out.push_str(&format!("{}", cache.matrix[[i, c]]));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_probability_cache(path: &Path) -> Result<ProbabilityCache> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            artifact: "probability cache".into(),
            path: path.to_path_buf(),
            command: "stack".into(),
        },
        _ => Error::io(format!("reading {}", path.display()), e),
    })?;
    let mut model_id = None;
    let mut split_hash = None;
    let mut classes: Option<Vec<String>> = None;
    let mut record_ids = Vec::new();
    let mut values = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("# ") {
            if let Some(v) = rest.strip_prefix("model_id=") {
                model_id = Some(v.to_string());
            } else if let Some(v) = rest.strip_prefix("split_hash=") {
                split_hash = Some(v.to_string());
            } else if let Some(v) = rest.strip_prefix("classes=") {
                classes = Some(v.split(';').map(str::to_string).collect());
            }
            continue;
        }
        let mut parts = line.split(',');
        let id = parts
            .next()
            .ok_or_else(|| Error::format(path, format!("line {}: empty row", ln + 1)))?;
        record_ids.push(id.to_string());
        for p in parts {
            let v: f64 = p
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: bad float '{p}'", ln + 1)))?;
            values.push(v);
        }
    }
    let classes = classes.ok_or_else(|| Error::format(path, "missing classes header"))?;
    let rows = record_ids.len();
    let cols = classes.len();
    if values.len() != rows * cols {
        return Err(Error::format(
            path,
            format!("expected {rows}x{cols} values, found {}", values.len()),
        ));
    }
    Ok(ProbabilityCache {
        model_id: model_id.ok_or_else(|| Error::format(path, "missing model_id header"))?,
        split_hash: split_hash.ok_or_else(|| Error::format(path, "missing split_hash header"))?,
        classes,
        record_ids,
        matrix: Array2::from_shape_vec((rows, cols), values)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?,
    })
}

//! Evaluation metrics and report emission: accuracy, per-class accuracy,
//! confusion matrices, average precision, and mAP.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::ClassRegistry;
use crate::error::{Error, Result};

/// Report file schema version.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn at(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class][predicted]
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, true_class: usize) -> u64 {
        self.counts[true_class].iter().sum()
    }

    /// `trace / total` as a percentage.
    pub fn overall_accuracy(&self) -> f64 {
        100.0 * self.trace() as f64 / self.total() as f64
    }

    /// Diagonal over row sum per class; `None` for classes absent from the
    /// evaluation set.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.classes.len())
            .map(|i| {
                let row = self.row_sum(i);
                if row == 0 {
                    None
                } else {
                    Some(100.0 * self.counts[i][i] as f64 / row as f64)
                }
            })
            .collect()
    }
}

/// Overall accuracy as a percentage.
pub fn accuracy(predictions: &[usize], truths: &[usize]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyInput("accuracy of an empty prediction set".into()));
    }
    let matches = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(100.0 * matches as f64 / predictions.len() as f64)
}

/// Builds the confusion matrix for `(prediction, truth)` pairs.
pub fn confusion(
    predictions: &[usize],
    truths: &[usize],
    registry: &ClassRegistry,
) -> Result<ConfusionMatrix> {
    if predictions.len() != truths.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let c = registry.len();
    let mut counts = vec![vec![0u64; c]; c];
    for (&p, &t) in predictions.iter().zip(truths) {
        if p >= c {
            return Err(Error::ClassIndexOutOfRange { index: p, classes: c });
        }
        if t >= c {
            return Err(Error::ClassIndexOutOfRange { index: t, classes: c });
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { classes: registry.classes().to_vec(), counts })
}

/// Average precision of one ranking in [0, 1].
///
/// Samples are ranked by descending score with stable ties (original index
/// order); AP is the mean of precision@k over the positive positions.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(Error::NoPositiveTags);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort keeps original index order within equal scores.
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut cumulative_positives = 0usize;
    let mut ap = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if labels[idx] == 1 {
            cumulative_positives += 1;
            ap += cumulative_positives as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(ap / positives as f64)
}

/// Per-tag APs plus their macro mean, as reported for tagging runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    /// Macro mean AP over included tags, as a percentage.
    pub map: f64,
    /// AP per tag; `None` for tags excluded for having no positive.
    pub per_tag_ap: Vec<Option<f64>>,
    /// Number of tags excluded from the mean.
    pub excluded_tags: usize,
}

/// Macro mAP over tags (columns). Tags with no positive label in the split
/// have undefined AP; they are excluded and counted.
pub fn mean_average_precision(scores: &Array2<f64>, labels: &Array2<u8>) -> Result<MapReport> {
    if scores.dim() != labels.dim() {
        return Err(Error::ShapeMismatch(format!(
            "score matrix {:?} vs label matrix {:?}",
            scores.dim(),
            labels.dim()
        )));
    }
    let (_, tags) = scores.dim();
    let mut per_tag_ap = Vec::with_capacity(tags);
    let mut sum = 0.0;
    let mut included = 0usize;
    for t in 0..tags {
        let col_scores: Vec<f64> = scores.column(t).to_vec();
        let col_labels: Vec<u8> = labels.column(t).to_vec();
        match average_precision(&col_scores, &col_labels) {
            Ok(ap) => {
                sum += ap;
                included += 1;
                per_tag_ap.push(Some(ap));
            }
            Err(Error::NoPositiveTags) => per_tag_ap.push(None),
            Err(e) => return Err(e),
        }
    }
    if included == 0 {
        return Err(Error::NoPositiveTags);
    }
    Ok(MapReport {
        map: 100.0 * sum / included as f64,
        per_tag_ap,
        excluded_tags: tags - included,
    })
}

/// Identifying metadata for one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub model_id: String,
    pub split: String,
    pub seed: Option<u64>,
    pub timestamp: String,
}

/// Full evaluation result for one model on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub run: RunInfo,
    pub overall_accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<MapReport>,
}

impl EvaluationReport {
    /// Assembles the classification report; accuracy fields are derived from
    /// the confusion matrix so the trace/total identity holds by
    /// construction.
    pub fn from_confusion(confusion: ConfusionMatrix, run: RunInfo) -> Self {
        EvaluationReport {
            schema_version: REPORT_SCHEMA_VERSION,
            overall_accuracy: confusion.overall_accuracy(),
            per_class_accuracy: confusion.per_class_accuracy(),
            confusion,
            run,
            map: None,
        }
    }

    pub fn with_map(mut self, map: MapReport) -> Self {
        self.map = Some(map);
        self
    }
}

/// File paths written by [`emit_report`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmittedReport {
    pub report_json: PathBuf,
    pub confusion_csv: PathBuf,
    pub heatmap_png: PathBuf,
}

/// Writes `report.json`, `confusion.csv` (class-name header row/column), and
/// `confusion.png` under `dir`. Byte-stable for an identical report.
pub fn emit_report(report: &EvaluationReport, dir: &Path) -> Result<EmittedReport> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let paths = EmittedReport {
        report_json: dir.join("report.json"),
        confusion_csv: dir.join("confusion.csv"),
        heatmap_png: dir.join("confusion.png"),
    };

    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::format(&paths.report_json, e.to_string()))?;
    std::fs::write(&paths.report_json, json)
        .map_err(|e| Error::io(format!("writing {}", paths.report_json.display()), e))?;

    let mut csv = String::new();
    csv.push_str("true\\predicted");
    for class in report.confusion.classes() {
        csv.push(',');
        csv.push_str(class);
    }
    csv.push('\n');
    for (i, row) in report.confusion.counts().iter().enumerate() {
        csv.push_str(&report.confusion.classes()[i]);
        for &v in row {
            csv.push(',');
            csv.push_str(&v.to_string());
        }
        csv.push('\n');
    }
    std::fs::write(&paths.confusion_csv, csv)
        .map_err(|e| Error::io(format!("writing {}", paths.confusion_csv.display()), e))?;

    render_heatmap(&report.confusion, &paths.heatmap_png)?;
    Ok(paths)
}

pub fn load_report(path: &Path) -> Result<EvaluationReport> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            artifact: "evaluation report".into(),
            path: path.to_path_buf(),
            command: "evaluate".into(),
        },
        _ => Error::io(format!("reading {}", path.display()), e),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Cell color ramp from dark blue (0) to bright yellow (max).
fn heat_color(fraction: f64) -> [u8; 3] {
    let f = fraction.clamp(0.0, 1.0);
    [
        (20.0 + 235.0 * f) as u8,
        (24.0 + 200.0 * f) as u8,
        (90.0 * (1.0 - f) + 40.0) as u8,
    ]
}

const HEATMAP_CELL: u32 = 32;

fn render_heatmap(matrix: &ConfusionMatrix, path: &Path) -> Result<()> {
    let c = matrix.classes().len() as u32;
    let side = c * HEATMAP_CELL + (c + 1);
    let max = matrix.counts().iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    let mut img = image::RgbImage::from_pixel(side, side, image::Rgb([255, 255, 255]));
    for (ti, row) in matrix.counts().iter().enumerate() {
        for (pi, &count) in row.iter().enumerate() {
            let color = image::Rgb(heat_color(count as f64 / max));
            let x0 = pi as u32 * (HEATMAP_CELL + 1) + 1;
            let y0 = ti as u32 * (HEATMAP_CELL + 1) + 1;
            for y in y0..y0 + HEATMAP_CELL {
                for x in x0..x0 + HEATMAP_CELL {
                    img.put_pixel(x, y, color);
                }
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::ImageEncode { path: path.to_path_buf(), source: e })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn registry3() -> ClassRegistry {
        ClassRegistry::from_labels(["Bhil", "Gond", "Warli"]).unwrap()
    }

    #[test]
    fn accuracy_percentages() {
        assert_abs_diff_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 100.0);
        assert_abs_diff_eq!(accuracy(&[0, 0], &[1, 2]).unwrap(), 0.0);
        let preds: Vec<usize> = (0..12).collect();
        let mut truths = preds.clone();
        truths[11] = 0;
        let acc = accuracy(&preds, &truths).unwrap();
        assert_abs_diff_eq!(acc, 100.0 * 11.0 / 12.0, epsilon = 1e-9);
        assert_abs_diff_eq!((acc * 100.0).round() / 100.0, 91.67, epsilon = 1e-9);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn perfect_predictions_give_a_diagonal_matrix() {
        let truths = vec![0, 1, 2, 0, 1, 2];
        let cm = confusion(&truths, &truths, &registry3()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(cm.at(i, j), if i == j { 2 } else { 0 });
            }
        }
        assert_abs_diff_eq!(cm.overall_accuracy(), 100.0);
    }

    #[test]
    fn single_confusion_lands_off_diagonal() {
        // One Gond (1) mislabeled as Bhil (0), all else perfect.
        let truths = vec![0, 1, 1, 2];
        let preds = vec![0, 0, 1, 2];
        let cm = confusion(&preds, &truths, &registry3()).unwrap();
        assert_eq!(cm.at(1, 0), 1);
        assert_eq!(cm.trace(), 3);
        let per_class = cm.per_class_accuracy();
        assert_abs_diff_eq!(per_class[0].unwrap(), 100.0);
        assert_abs_diff_eq!(per_class[1].unwrap(), 50.0);
    }

    #[test]
    fn confusion_rejects_out_of_range_indices() {
        assert!(matches!(
            confusion(&[7], &[0], &registry3()),
            Err(Error::ClassIndexOutOfRange { .. })
        ));
    }

    #[test]
    fn trace_total_identity_matches_accuracy() {
        let preds = vec![0, 1, 2, 2, 1, 0, 0];
        let truths = vec![0, 1, 1, 2, 1, 2, 0];
        let cm = confusion(&preds, &truths, &registry3()).unwrap();
        assert_abs_diff_eq!(
            cm.overall_accuracy(),
            accuracy(&preds, &truths).unwrap(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn ap_of_perfect_ranking_is_one() {
        let ap = average_precision(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_abs_diff_eq!(ap, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ap_interleaved_example() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[1, 0, 1]).unwrap();
        assert_abs_diff_eq!(ap, (1.0 + 2.0 / 3.0) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn ap_single_positive_ranked_last() {
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.1], &[0, 0, 0, 1]).unwrap();
        assert_abs_diff_eq!(ap, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn ap_without_positives_is_undefined() {
        assert!(matches!(
            average_precision(&[0.5, 0.4], &[0, 0]),
            Err(Error::NoPositiveTags)
        ));
    }

    #[test]
    fn ap_ties_break_by_original_index() {
        // Equal scores: the positive at index 0 outranks the negative at 1.
        let ap_front = average_precision(&[0.5, 0.5], &[1, 0]).unwrap();
        assert_abs_diff_eq!(ap_front, 1.0, epsilon = 1e-12);
        let ap_back = average_precision(&[0.5, 0.5], &[0, 1]).unwrap();
        assert_abs_diff_eq!(ap_back, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn map_is_the_macro_mean_times_hundred() {
        // Tag 0 AP = 1.0 (positive ranked first), tag 1 AP = 0.5.
        let scores = ndarray::array![[0.9, 0.9], [0.1, 0.8]];
        let labels = ndarray::array![[1u8, 0], [0, 1]];
        let report = mean_average_precision(&scores, &labels).unwrap();
        assert_abs_diff_eq!(report.map, 75.0, epsilon = 1e-9);
        assert_eq!(report.excluded_tags, 0);
    }

    #[test]
    fn map_excludes_and_counts_positive_free_tags() {
        let scores = ndarray::array![[0.9, 0.2], [0.1, 0.8]];
        let labels = ndarray::array![[1u8, 0], [0, 0]];
        let report = mean_average_precision(&scores, &labels).unwrap();
        assert_abs_diff_eq!(report.map, 100.0, epsilon = 1e-9);
        assert_eq!(report.excluded_tags, 1);
        assert_eq!(report.per_tag_ap[1], None);

        let all_zero = ndarray::Array2::<u8>::zeros((2, 2));
        assert!(matches!(
            mean_average_precision(&scores, &all_zero),
            Err(Error::NoPositiveTags)
        ));
    }

    #[test]
    fn report_round_trips_through_emit_and_load() {
        let truths = vec![0, 1, 2, 1];
        let preds = vec![0, 1, 2, 2];
        let cm = confusion(&preds, &truths, &registry3()).unwrap();
        let report = EvaluationReport::from_confusion(
            cm,
            RunInfo {
                model_id: "probe".into(),
                split: "test".into(),
                seed: Some(7),
                timestamp: "2025-01-01T00:00:00Z".into(),
            },
        );
        let dir = tempfile::tempdir().unwrap();
        let emitted = emit_report(&report, dir.path()).unwrap();
        let loaded = load_report(&emitted.report_json).unwrap();
        assert_eq!(loaded, report);

        let csv = std::fs::read_to_string(&emitted.confusion_csv).unwrap();
        assert!(csv.starts_with("true\\predicted,Bhil,Gond,Warli"));
        assert!(emitted.heatmap_png.exists());

        // Byte-stable: emitting the identical report again produces
        // identical files.
        let before = std::fs::read(&emitted.report_json).unwrap();
        let png_before = std::fs::read(&emitted.heatmap_png).unwrap();
        emit_report(&report, dir.path()).unwrap();
        assert_eq!(std::fs::read(&emitted.report_json).unwrap(), before);
        assert_eq!(std::fs::read(&emitted.heatmap_png).unwrap(), png_before);
    }

    /// Pairwise-counting AP oracle, O(n^2), independent of the sort-based
    /// implementation.
    pub(crate) fn ap_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let positives = labels.iter().filter(|&&l| l == 1).count();
        let mut total = 0.0;
        for i in 0..scores.len() {
            if labels[i] != 1 {
                continue;
            }
            let rank = 1 + (0..scores.len())
                .filter(|&j| {
                    scores[j] > scores[i] || (scores[j] == scores[i] && j < i)
                })
                .count();
            let positives_at_or_above = (0..scores.len())
                .filter(|&j| {
                    labels[j] == 1
                        && (scores[j] > scores[i] || (scores[j] == scores[i] && j <= i))
                })
                .count();
            total += positives_at_or_above as f64 / rank as f64;
        }
        total / positives as f64
    }

    proptest! {
        #[test]
        fn ap_matches_pairwise_oracle(
            scores in proptest::collection::vec(0.0f64..1.0, 1..9),
            label_bits in proptest::collection::vec(proptest::bool::ANY, 1..9),
        ) {
            let n = scores.len().min(label_bits.len());
            let scores = &scores[..n];
            let mut labels: Vec<u8> = label_bits[..n].iter().map(|&b| b as u8).collect();
            if labels.iter().all(|&l| l == 0) {
                labels[0] = 1;
            }
            let ap = average_precision(scores, &labels).unwrap();
            prop_assert!((ap - ap_oracle(scores, &labels)).abs() < 1e-12);
        }

        #[test]
        fn ap_is_score_scale_invariant(
            scores in proptest::collection::vec(0.01f64..1.0, 2..8),
            scale in 0.1f64..50.0,
        ) {
            let mut labels = vec![0u8; scores.len()];
            labels[scores.len() / 2] = 1;
            let scaled: Vec<f64> = scores.iter().map(|s| s * scale).collect();
            let a = average_precision(&scores, &labels).unwrap();
            let b = average_precision(&scaled, &labels).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

//! Classifier model: a backbone adapter plus the feed-forward head.

mod backbone;
mod checkpoint;
mod head;
mod loss;

pub use backbone::{
    check_batch, create_backbone, BackboneAdapter, TinyPatchBackbone, EXTERNAL_BACKBONES,
    TINY_PATCH_GAP_DIM,
};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointFile, LabelSpace, LoadedCheckpoint, TrainingMeta,
    CHECKPOINT_VERSION,
};
pub use head::{Head, HeadConfig, HeadForward, HeadGradient, OutputActivation, DEFAULT_HIDDEN_DIM};
pub use loss::{binary_cross_entropy, cross_entropy, cross_entropy_for_class, LOG_EPSILON};

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::ClassRegistry;
use crate::error::{Error, Result};
use crate::preprocess::NormalizedTensor;
use crate::tags::{MultiHotVector, TagVocabulary};

/// Multi-class (softmax, one label) or multi-label (sigmoid, independent
/// tags).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Multiclass,
    Multilabel,
}

impl TaskKind {
    pub fn activation(self) -> OutputActivation {
        match self {
            TaskKind::Multiclass => OutputActivation::Softmax,
            TaskKind::Multilabel => OutputActivation::Sigmoid,
        }
    }
}

/// Output of one model for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityVector {
    values: Vec<f64>,
}

impl ProbabilityVector {
    pub fn new(values: Vec<f64>) -> Self {
        ProbabilityVector { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the maximum entry; exact ties break to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }
}

/// Training targets for one batch.
pub enum BatchTargets<'a> {
    Classes(&'a [usize]),
    Tags(&'a [MultiHotVector]),
}

/// Loss, flat gradient, and running-accuracy contribution for one batch.
pub struct BatchGradient {
    /// Mean loss over the batch.
    pub loss: f64,
    /// `d(mean loss)/d(params)`, layout matching [`ClassifierModel::parameters`].
    pub gradient: Vec<f64>,
    /// Correctness numerator: exact argmax matches for multi-class, mean
    /// per-label agreement at 0.5 for multi-label.
    pub correct: f64,
}

/// A backbone adapter with the classification head on top.
#[derive(Clone)]
pub struct ClassifierModel {
    backbone: Box<dyn BackboneAdapter>,
    head: Head,
    task: TaskKind,
}

impl ClassifierModel {
    /// Builds a model with a freshly initialized head (hidden width 1024).
    pub fn new(backbone: Box<dyn BackboneAdapter>, task: TaskKind, output_dim: usize, seed: u64) -> Result<Self> {
        let config = HeadConfig::new(backbone.profile().gap_dim, output_dim, task.activation());
        let head = Head::build(config, seed)?;
        Ok(ClassifierModel { backbone, head, task })
    }

    /// Assembles a model from existing parts, checking consistency.
    pub fn from_parts(backbone: Box<dyn BackboneAdapter>, head: Head, task: TaskKind) -> Result<Self> {
        if head.config().input_dim != backbone.profile().gap_dim {
            return Err(Error::ShapeMismatch(format!(
                "head input {} does not match backbone gap_dim {}",
                head.config().input_dim,
                backbone.profile().gap_dim
            )));
        }
        if head.config().activation != task.activation() {
            return Err(Error::InvalidConfig(
                "softmax is for multi-class and sigmoid for multi-label".into(),
            ));
        }
        Ok(ClassifierModel { backbone, head, task })
    }

    pub fn backbone(&self) -> &dyn BackboneAdapter {
        self.backbone.as_ref()
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn output_dim(&self) -> usize {
        self.head.config().output_dim
    }

    pub fn param_count(&self) -> usize {
        self.backbone.parameters().len() + self.head.param_count()
    }

    /// Flat parameters: backbone first, then head.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = self.backbone.parameters();
        out.extend(self.head.parameters());
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        let split = self.backbone.parameters().len();
        if params.len() != split + self.head.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} model parameters, got {}",
                split + self.head.param_count(),
                params.len()
            )));
        }
        self.backbone.set_parameters(&params[..split])?;
        self.head.set_parameters(&params[split..])
    }

    /// Probability batch of shape `(batch, output_dim)`. Multi-class rows
    /// sum to 1; multi-label entries lie in [0, 1] independently.
    pub fn forward(&self, batch: &[NormalizedTensor]) -> Result<Array2<f64>> {
        let features = self.backbone.forward(batch)?;
        Ok(self.head.forward(&features)?.probabilities)
    }

    pub fn forward_single(&self, tensor: &NormalizedTensor) -> Result<ProbabilityVector> {
        let probs = self.forward(std::slice::from_ref(tensor))?;
        Ok(ProbabilityVector::new(probs.row(0).to_vec()))
    }

    /// Mean loss and its gradient for one batch.
    ///
    /// Multi-class uses categorical cross-entropy against the class indices;
    /// multi-label uses binary cross-entropy averaged over labels. Backbone
    /// gradients are zero when the adapter is frozen.
    pub fn loss_and_gradient(
        &self,
        batch: &[NormalizedTensor],
        targets: &BatchTargets<'_>,
    ) -> Result<BatchGradient> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("empty training batch".into()));
        }
        let n = batch.len();
        let out_dim = self.output_dim();
        let features = self.backbone.forward(batch)?;
        let fwd = self.head.forward(&features)?;
        let probs = &fwd.probabilities;

        let mut loss = 0.0;
        let mut correct = 0.0;
        // For softmax + CE and sigmoid + BCE alike, d(loss)/d(logits) is
        // (p - y) scaled by the averaging denominator.
        let mut grad_logits = Array2::<f64>::zeros((n, out_dim));
        match targets {
            BatchTargets::Classes(labels) => {
                if labels.len() != n {
                    return Err(Error::ShapeMismatch(format!(
                        "{n} images but {} labels",
                        labels.len()
                    )));
                }
                if self.task != TaskKind::Multiclass {
                    return Err(Error::InvalidConfig("class targets need a multi-class model".into()));
                }
                for (i, &label) in labels.iter().enumerate() {
                    if label >= out_dim {
                        return Err(Error::ClassIndexOutOfRange { index: label, classes: out_dim });
                    }
                    let row = probs.row(i);
                    loss += -row[label].max(LOG_EPSILON).ln();
                    let pred = ProbabilityVector::new(row.to_vec()).argmax();
                    if pred == label {
                        correct += 1.0;
                    }
                    for j in 0..out_dim {
                        grad_logits[[i, j]] =
                            (row[j] - if j == label { 1.0 } else { 0.0 }) / n as f64;
                    }
                }
                loss /= n as f64;
            }
            BatchTargets::Tags(tag_rows) => {
                if tag_rows.len() != n {
                    return Err(Error::ShapeMismatch(format!(
                        "{n} images but {} label rows",
                        tag_rows.len()
                    )));
                }
                if self.task != TaskKind::Multilabel {
                    return Err(Error::InvalidConfig("tag targets need a multi-label model".into()));
                }
                for (i, tags) in tag_rows.iter().enumerate() {
                    if tags.len() != out_dim {
                        return Err(Error::VectorLengthMismatch {
                            got: tags.len(),
                            expected: out_dim,
                        });
                    }
                    let row = probs.row(i);
                    let mut agree = 0usize;
                    for (j, &y) in tags.bits().iter().enumerate() {
                        let p = row[j].clamp(LOG_EPSILON, 1.0 - LOG_EPSILON);
                        loss -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
                        if (row[j] > 0.5) == (y == 1) {
                            agree += 1;
                        }
                        grad_logits[[i, j]] = (row[j] - y as f64) / (n * out_dim) as f64;
                    }
                    correct += agree as f64 / out_dim as f64;
                }
                loss /= (n * out_dim) as f64;
            }
        }

        let head_grad = self.head.backward(&features, &fwd, &grad_logits);
        let backbone_grad = if self.backbone.is_trainable() {
            self.backbone.parameter_gradient(batch, &head_grad.input)?
        } else {
            vec![0.0; self.backbone.parameters().len()]
        };
        let mut gradient = backbone_grad;
        gradient.extend(head_grad.params);
        Ok(BatchGradient { loss, gradient, correct })
    }
}

/// Looks up the argmax class name; exact ties go to the lowest index.
pub fn predict_class(
    model: &ClassifierModel,
    image: &NormalizedTensor,
    registry: &ClassRegistry,
) -> Result<String> {
    if model.task() != TaskKind::Multiclass {
        return Err(Error::InvalidConfig("predict_class needs a multi-class model".into()));
    }
    if model.output_dim() != registry.len() {
        return Err(Error::ShapeMismatch(format!(
            "model outputs {} classes but registry has {}",
            model.output_dim(),
            registry.len()
        )));
    }
    let probs = model.forward_single(image)?;
    Ok(registry
        .class_at(probs.argmax())
        .expect("argmax is within registry")
        .to_string())
}

/// Tags whose score strictly exceeds the threshold (default 0.5).
pub fn predict_tags(
    model: &ClassifierModel,
    image: &NormalizedTensor,
    vocab: &TagVocabulary,
    threshold: f64,
) -> Result<BTreeSet<String>> {
    if model.task() != TaskKind::Multilabel {
        return Err(Error::InvalidConfig("predict_tags needs a multi-label model".into()));
    }
    if model.output_dim() != vocab.len() {
        return Err(Error::ShapeMismatch(format!(
            "model outputs {} tags but vocabulary has {}",
            model.output_dim(),
            vocab.len()
        )));
    }
    let probs = model.forward_single(image)?;
    Ok(select_tags(probs.values(), vocab, threshold))
}

/// Threshold rule shared by `predict_tags` and score-level callers: strictly
/// greater than `threshold`.
pub fn select_tags(scores: &[f64], vocab: &TagVocabulary, threshold: f64) -> BTreeSet<String> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > threshold)
        .map(|(i, _)| vocab.tags()[i].clone())
        .collect()
}

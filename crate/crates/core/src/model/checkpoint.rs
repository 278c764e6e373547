//! Self-describing checkpoint files.
//!
//! A checkpoint carries everything needed to reconstruct the model and
//! interpret its outputs: backbone identifier, head configuration, task,
//! the label space (class roster or tag vocabulary) plus its hash, the flat
//! parameter vector, and training metadata.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::ClassRegistry;
use crate::error::{Error, Result};
use crate::model::{create_backbone, ClassifierModel, Head, HeadConfig, TaskKind};
use crate::tags::TagVocabulary;

pub const CHECKPOINT_VERSION: u32 = 1;

/// What the model's output dimension indexes into.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "names")]
pub enum LabelSpace {
    Classes(Vec<String>),
    Tags(Vec<String>),
}

impl LabelSpace {
    pub fn len(&self) -> usize {
        match self {
            LabelSpace::Classes(v) | LabelSpace::Tags(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn content_hash(&self) -> String {
        match self {
            LabelSpace::Classes(v) | LabelSpace::Tags(v) => {
                crate::hash_lines(v.iter().map(String::as_str))
            }
        }
    }

    pub fn registry(&self) -> Result<ClassRegistry> {
        match self {
            LabelSpace::Classes(v) => ClassRegistry::from_labels(v),
            LabelSpace::Tags(_) => {
                Err(Error::IncompatibleCheckpoint("checkpoint holds a tag vocabulary".into()))
            }
        }
    }

    pub fn vocabulary(&self) -> Result<TagVocabulary> {
        match self {
            LabelSpace::Tags(v) => TagVocabulary::from_tags(v.iter().cloned()),
            LabelSpace::Classes(_) => {
                Err(Error::IncompatibleCheckpoint("checkpoint holds a class roster".into()))
            }
        }
    }
}

/// Run provenance stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub best_epoch: usize,
    pub best_metric: f64,
    /// Name of the monitored metric, e.g. `validation_accuracy`.
    pub monitor: String,
    /// RFC 3339 wall-clock time of the save; excluded from reproducibility
    /// comparisons.
    pub timestamp: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub format_version: u32,
    pub backbone_id: String,
    pub head: HeadConfig,
    pub task: TaskKind,
    pub label_space: LabelSpace,
    pub label_hash: String,
    pub params: Vec<f64>,
    pub metadata: TrainingMeta,
}

/// A checkpoint deserialized back into a usable model.
pub struct LoadedCheckpoint {
    pub model: ClassifierModel,
    pub label_space: LabelSpace,
    pub metadata: TrainingMeta,
}

pub fn save_checkpoint(
    path: &Path,
    model: &ClassifierModel,
    label_space: &LabelSpace,
    metadata: TrainingMeta,
) -> Result<()> {
    if label_space.len() != model.output_dim() {
        return Err(Error::ShapeMismatch(format!(
            "label space has {} entries but the model outputs {}",
            label_space.len(),
            model.output_dim()
        )));
    }
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        backbone_id: model.backbone().identifier().to_string(),
        head: model.head().config().clone(),
        task: model.task(),
        label_space: label_space.clone(),
        label_hash: label_space.content_hash(),
        params: model.parameters(),
        metadata,
    };
    let json = serde_json::to_string(&file)
        .map_err(|e| Error::format(path, format!("serializing checkpoint: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            artifact: "checkpoint".into(),
            path: path.to_path_buf(),
            command: "train".into(),
        },
        _ => Error::io(format!("reading {}", path.display()), e),
    })?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(Error::IncompatibleCheckpoint(format!(
            "format version {} (this build reads {CHECKPOINT_VERSION})",
            file.format_version
        )));
    }
    if file.label_space.content_hash() != file.label_hash {
        return Err(Error::IncompatibleCheckpoint("label hash does not match contents".into()));
    }
    if file.head.activation != file.task.activation() {
        return Err(Error::IncompatibleCheckpoint(
            "head activation does not match the task".into(),
        ));
    }
    // The stored parameters overwrite initialization, so the factory seed is
    // irrelevant here.
    let backbone = create_backbone(&file.backbone_id, 0)?;
    let head = Head::build(file.head.clone(), 0)?;
    let mut model = ClassifierModel::from_parts(backbone, head, file.task)?;
    model.set_parameters(&file.params).map_err(|_| {
        Error::IncompatibleCheckpoint(format!(
            "parameter count {} does not match the declared architecture",
            file.params.len()
        ))
    })?;
    Ok(LoadedCheckpoint { model, label_space: file.label_space, metadata: file.metadata })
}

//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// One validation problem found while ingesting a manifest.
///
/// Manifest validation is batch-reported: every problem in the file is
/// collected before the load fails, so curation fixes can happen in one pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ManifestIssue {
    /// A row could not be parsed.
    Malformed { line: usize, message: String },
    /// The same record id appears more than once.
    DuplicateId { id: String },
    /// A record carries an empty class label.
    EmptyClass { id: String },
    /// A record's class label is not in the expected registry.
    UnknownClass { id: String, class: String },
    /// A record's image file does not exist.
    UnresolvablePath { id: String, path: PathBuf },
}

impl std::fmt::Display for ManifestIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ManifestIssue::Malformed { line, message } => {
                write!(f, "line {line}: {message}")
            }
            ManifestIssue::DuplicateId { id } => write!(f, "duplicate id '{id}'"),
            ManifestIssue::EmptyClass { id } => write!(f, "record '{id}': empty class label"),
            ManifestIssue::UnknownClass { id, class } => {
                write!(f, "record '{id}': unknown class '{class}'")
            }
            ManifestIssue::UnresolvablePath { id, path } => {
                write!(f, "record '{id}': unresolvable path {}", path.display())
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty manifest")]
    EmptyManifest,

    #[error("invalid manifest ({} issue(s)):\n{}", .0.len(), format_issues(.0))]
    InvalidManifest(Vec<ManifestIssue>),

    #[error("split ratios ({0}, {1}, {2}) are invalid: {3}")]
    InvalidRatios(f64, f64, f64, String),

    #[error("class '{class}' has only {count} record(s); at least 3 are required to split")]
    TooFewRecords { class: String, count: usize },

    #[error("{count} record(s) have no split assignment; run the split stage first")]
    UnassignedRecords { count: usize },

    #[error("crop box ({x}, {y}, {w}, {h}) exceeds image bounds {width}x{height}")]
    CropOutOfBounds { x: u32, y: u32, w: u32, h: u32, width: u32, height: u32 },

    #[error("border trim produced a zero-area image")]
    DegenerateCrop,

    #[error("failed to decode image {path}: {source}")]
    ImageDecode { path: PathBuf, source: image::ImageError },

    #[error("failed to encode image {path}: {source}")]
    ImageEncode { path: PathBuf, source: image::ImageError },

    #[error("synonym map line {line}: {message}")]
    SynonymMap { line: usize, message: String },

    #[error("vocabulary is empty")]
    EmptyVocabulary,

    #[error("duplicate tag '{0}' in vocabulary")]
    DuplicateTag(String),

    #[error("vector length {got} does not match vocabulary size {expected}")]
    VectorLengthMismatch { got: usize, expected: usize },

    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid label: {0}")]
    InvalidLabel(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown backbone '{0}'; built-in adapters are tiny-patch-<grid> (e.g. tiny-patch-8)")]
    UnknownBackbone(String),

    #[error("split '{0}' is empty")]
    EmptySplit(String),

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("models disagree on the label space: {0}")]
    RegistryMismatch(String),

    #[error("stacked feature width {got} does not match the fitted width {expected}")]
    FeatureWidthMismatch { got: usize, expected: usize },

    #[error("cannot fit a meta-classifier on fewer than 2 classes")]
    SingleClassLabels,

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("class index {index} out of range for {classes} classes")]
    ClassIndexOutOfRange { index: usize, classes: usize },

    #[error("no tag has a positive label; mAP is undefined")]
    NoPositiveTags,

    #[error("checkpoint is incompatible: {0}")]
    IncompatibleCheckpoint(String),

    #[error("{artifact} not found at {path}; run `folktalent {command}` first")]
    MissingArtifact { artifact: String, path: PathBuf, command: String },

    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },

    #[error("failed to parse {path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn format_issues(issues: &[ManifestIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("  - {i}"))
        .collect::<Vec<_>>()
        .join("\n")
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

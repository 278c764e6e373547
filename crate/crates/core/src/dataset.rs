//! Dataset manifests: loading, validation, stratified splitting.
//!
//! A manifest is the unit of dataset management. Records enter with
//! `split = unassigned`; `stratified_split` produces a new manifest with
//! frozen assignments, which is persisted back to disk so a split is an
//! explicit artifact and never recomputed implicitly.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, ManifestIssue, Result};

/// Dataset partition a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }

    fn parse(s: &str) -> Option<Split> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Some(Split::Train),
            "validation" | "val" => Some(Split::Validation),
            "test" => Some(Split::Test),
            "" | "unassigned" => Some(Split::Unassigned),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The three assigned splits, in reporting order.
pub const ASSIGNED_SPLITS: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

/// Ordered class roster with a bijective name -> index mapping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRegistry {
    classes: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl ClassRegistry {
    /// Builds a registry from labels in first-appearance order.
    pub fn from_labels<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut classes = Vec::new();
        let mut index = HashMap::new();
        for label in labels {
            let label = label.as_ref();
            if label.is_empty() {
                return Err(Error::InvalidLabel("empty class label".into()));
            }
            if !index.contains_key(label) {
                index.insert(label.to_string(), classes.len());
                classes.push(label.to_string());
            }
        }
        if classes.is_empty() {
            return Err(Error::InvalidLabel("no class labels".into()));
        }
        Ok(ClassRegistry { classes, index })
    }

    pub fn index_of(&self, class: &str) -> Option<usize> {
        self.index.get(class).copied()
    }

    pub fn class_at(&self, index: usize) -> Option<&str> {
        self.classes.get(index).map(String::as_str)
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Content hash of the ordered class list, for checkpoint compatibility checks.
    pub fn content_hash(&self) -> String {
        crate::hash_lines(self.classes.iter().map(String::as_str))
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect();
    }
}

/// Curator-supplied crop region, `x,y` top-left corner plus width/height.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl CropBox {
    fn parse(s: &str) -> Option<CropBox> {
        let parts: Vec<u32> = s
            .split(',')
            .map(|p| p.trim().parse().ok())
            .collect::<Option<Vec<_>>>()?;
        match parts[..] {
            [x, y, w, h] => Some(CropBox { x, y, w, h }),
            _ => None,
        }
    }

    fn to_field(self) -> String {
        format!("{},{},{},{}", self.x, self.y, self.w, self.h)
    }
}

/// One painting: file reference, class label, raw tags, split assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub path: PathBuf,
    pub class_label: String,
    pub raw_tags: Vec<String>,
    pub split: Split,
    pub crop: Option<CropBox>,
}

/// Train/validation/test fractions. Must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self> {
        let r = SplitRatios { train, validation, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: &str| {
            Err(Error::InvalidRatios(self.train, self.validation, self.test, msg.into()))
        };
        if !(self.train.is_finite() && self.validation.is_finite() && self.test.is_finite()) {
            return invalid("non-finite fraction");
        }
        if self.train <= 0.0 || self.validation < 0.0 || self.test < 0.0 {
            return invalid("train fraction must be positive, others nonnegative");
        }
        let sum = self.train + self.validation + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return invalid("fractions must sum to 1");
        }
        Ok(())
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.6, validation: 0.2, test: 0.2 }
    }
}

/// Whether `load_manifest` verifies that record paths resolve on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathCheck {
    /// Paths must exist, resolved relative to the manifest's directory.
    Require,
    /// Skip the filesystem check (split bookkeeping does not need pixels).
    Skip,
}

/// Immutable collection of records plus the class registry derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    records: Vec<ImageRecord>,
    registry: ClassRegistry,
    split_ratios: Option<SplitRatios>,
}

impl DatasetManifest {
    /// Builds a manifest from in-memory records, validating ids and labels.
    pub fn from_records(records: Vec<ImageRecord>) -> Result<Self> {
        Self::from_records_checked(records, None)
    }

    fn from_records_checked(
        records: Vec<ImageRecord>,
        expected: Option<&ClassRegistry>,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyManifest);
        }
        let mut issues = Vec::new();
        let mut seen = HashSet::new();
        for rec in &records {
            if !seen.insert(rec.id.clone()) {
                issues.push(ManifestIssue::DuplicateId { id: rec.id.clone() });
            }
            if rec.class_label.is_empty() {
                issues.push(ManifestIssue::EmptyClass { id: rec.id.clone() });
            } else if let Some(reg) = expected {
                if reg.index_of(&rec.class_label).is_none() {
                    issues.push(ManifestIssue::UnknownClass {
                        id: rec.id.clone(),
                        class: rec.class_label.clone(),
                    });
                }
            }
        }
        if !issues.is_empty() {
            return Err(Error::InvalidManifest(issues));
        }
        let registry = match expected {
            Some(reg) => reg.clone(),
            None => ClassRegistry::from_labels(records.iter().map(|r| r.class_label.as_str()))?,
        };
        Ok(DatasetManifest { records, registry, split_ratios: None })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn registry(&self) -> &ClassRegistry {
        &self.registry
    }

    pub fn split_ratios(&self) -> Option<SplitRatios> {
        self.split_ratios
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Indices of records assigned to `split`, in manifest order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Content hash of the ordered record ids in `split`, used to key
    /// probability caches.
    pub fn split_hash(&self, split: Split) -> String {
        crate::hash_lines(
            self.records
                .iter()
                .filter(|r| r.split == split)
                .map(|r| r.id.as_str()),
        )
    }

    pub fn has_unassigned(&self) -> bool {
        self.records.iter().any(|r| r.split == Split::Unassigned)
    }
}

/// Loads a manifest file, collecting every validation problem before failing.
///
/// The format is CSV with a header: required columns `id, path, class, tags`,
/// optional `split` and `crop`. `tags` is a `;`-separated list, `crop` is
/// `x,y,w,h`.
pub fn load_manifest(source: &Path, path_check: PathCheck) -> Result<DatasetManifest> {
    load_manifest_with(source, path_check, None)
}

/// Like [`load_manifest`] but validates class labels against `expected`.
pub fn load_manifest_with(
    source: &Path,
    path_check: PathCheck,
    expected: Option<&ClassRegistry>,
) -> Result<DatasetManifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(source)
        .map_err(|e| Error::format(source, e.to_string()))?;

    let headers = reader
        .headers()
        .map_err(|e| Error::format(source, e.to_string()))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (id_col, path_col, class_col, tags_col) =
        match (col("id"), col("path"), col("class"), col("tags")) {
            (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
            _ => {
                return Err(Error::format(
                    source,
                    "header must contain columns id, path, class, tags",
                ))
            }
        };
    let split_col = col("split");
    let crop_col = col("crop");

    let base_dir = source.parent().unwrap_or_else(|| Path::new("."));
    let mut issues = Vec::new();
    let mut records = Vec::new();

    for (row_idx, row) in reader.records().enumerate() {
        let line = row_idx + 2; // 1-based, after the header
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                issues.push(ManifestIssue::Malformed { line, message: e.to_string() });
                continue;
            }
        };
        let field = |i: usize| row.get(i).unwrap_or("").trim().to_string();
        let id = field(id_col);
        if id.is_empty() {
            issues.push(ManifestIssue::Malformed { line, message: "empty id".into() });
            continue;
        }
        let rel_path = PathBuf::from(field(path_col));
        let raw_tags: Vec<String> = field(tags_col)
            .split(';')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect();
        let split = match split_col.map(&field) {
            None => Split::Unassigned,
            Some(s) => match Split::parse(&s) {
                Some(sp) => sp,
                None => {
                    issues.push(ManifestIssue::Malformed {
                        line,
                        message: format!("unknown split '{s}'"),
                    });
                    continue;
                }
            },
        };
        let crop = match crop_col.map(&field) {
            None => None,
            Some(s) if s.is_empty() => None,
            Some(s) => match CropBox::parse(&s) {
                Some(c) => Some(c),
                None => {
                    issues.push(ManifestIssue::Malformed {
                        line,
                        message: format!("malformed crop '{s}' (expected x,y,w,h)"),
                    });
                    continue;
                }
            },
        };
        if path_check == PathCheck::Require {
            let resolved = if rel_path.is_absolute() {
                rel_path.clone()
            } else {
                base_dir.join(&rel_path)
            };
            if !resolved.exists() {
                issues.push(ManifestIssue::UnresolvablePath {
                    id: id.clone(),
                    path: resolved,
                });
            }
        }
        records.push(ImageRecord {
            id,
            path: rel_path,
            class_label: field(class_col),
            raw_tags,
            split,
            crop,
        });
    }

    if records.is_empty() && issues.is_empty() {
        return Err(Error::EmptyManifest);
    }
    if !issues.is_empty() {
        // Merge row-level issues with record-level ones in a single report.
        if let Err(Error::InvalidManifest(mut more)) =
            DatasetManifest::from_records_checked(records, expected)
        {
            issues.append(&mut more);
        }
        return Err(Error::InvalidManifest(issues));
    }
    DatasetManifest::from_records_checked(records, expected)
}

/// Persists a manifest (including split assignments) in the load format.
pub fn save_manifest(manifest: &DatasetManifest, destination: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(destination)
        .map_err(|e| Error::io(format!("writing {}", destination.display()), into_io(e)))?;
    writer
        .write_record(["id", "path", "class", "tags", "split", "crop"])
        .map_err(|e| Error::io("writing manifest header", into_io(e)))?;
    for rec in manifest.records() {
        let split = match rec.split {
            Split::Unassigned => String::new(),
            s => s.as_str().to_string(),
        };
        let crop = rec.crop.map(CropBox::to_field).unwrap_or_default();
        writer
            .write_record([
                rec.id.as_str(),
                &rec.path.to_string_lossy(),
                rec.class_label.as_str(),
                &rec.raw_tags.join(";"),
                &split,
                &crop,
            ])
            .map_err(|e| Error::io("writing manifest row", into_io(e)))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io("flushing manifest", e))?;
    Ok(())
}

fn into_io(e: csv::Error) -> std::io::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io,
        other => std::io::Error::other(format!("{other:?}")),
    }
}

/// Stratified split: per class, shuffle with `seed`, then assign
/// `floor(n * r_train)` records to train, `floor(n * r_val)` to validation,
/// and the remainder to test.
///
/// Returns a new manifest; the input is untouched. Deterministic for a given
/// `(manifest, ratios, seed)` triple.
pub fn stratified_split(
    manifest: &DatasetManifest,
    ratios: SplitRatios,
    seed: u64,
) -> Result<DatasetManifest> {
    ratios.validate()?;
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); manifest.registry().len()];
    for (i, rec) in manifest.records().iter().enumerate() {
        let ci = manifest
            .registry()
            .index_of(&rec.class_label)
            .expect("registry covers all manifest labels");
        per_class[ci].push(i);
    }
    for (ci, members) in per_class.iter().enumerate() {
        if members.len() < 3 {
            return Err(Error::TooFewRecords {
                class: manifest.registry().classes()[ci].clone(),
                count: members.len(),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = manifest.records().to_vec();
    for members in &mut per_class {
        members.shuffle(&mut rng);
        let n = members.len();
        let n_train = (n as f64 * ratios.train).floor() as usize;
        let n_val = (n as f64 * ratios.validation).floor() as usize;
        for (pos, &rec_idx) in members.iter().enumerate() {
            records[rec_idx].split = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Validation
            } else {
                Split::Test
            };
        }
    }

    let mut out = DatasetManifest::from_records(records)?;
    out.split_ratios = Some(ratios);
    Ok(out)
}

/// Per-class record counts by split, backing the distribution bar chart.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DistributionTable {
    pub classes: Vec<String>,
    /// `counts[class][k]` for k in train/validation/test order.
    pub counts: Vec<[usize; 3]>,
}

impl DistributionTable {
    pub fn class_total(&self, class_idx: usize) -> usize {
        self.counts[class_idx].iter().sum()
    }

    pub fn total(&self) -> usize {
        (0..self.classes.len()).map(|i| self.class_total(i)).sum()
    }
}

/// Tabulates (class, split) counts. Errors if any record is unassigned.
pub fn class_distribution(manifest: &DatasetManifest) -> Result<DistributionTable> {
    let unassigned = manifest
        .records()
        .iter()
        .filter(|r| r.split == Split::Unassigned)
        .count();
    if unassigned > 0 {
        return Err(Error::UnassignedRecords { count: unassigned });
    }
    let mut counts = vec![[0usize; 3]; manifest.registry().len()];
    for rec in manifest.records() {
        let ci = manifest
            .registry()
            .index_of(&rec.class_label)
            .expect("registry covers all manifest labels");
        let si = ASSIGNED_SPLITS
            .iter()
            .position(|&s| s == rec.split)
            .expect("record is assigned");
        counts[ci][si] += 1;
    }
    Ok(DistributionTable { classes: manifest.registry().classes().to_vec(), counts })
}

impl DatasetManifest {
    /// Restores the registry index after deserialization.
    pub fn restore_index(&mut self) {
        self.registry.rebuild_index();
    }
}

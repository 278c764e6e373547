//! Prepared in-memory datasets: rasters trimmed and resized per backbone
//! profile, with class/tag labels, grouped by split.
//!
//! Normalization happens per batch so only 8-bit rasters are held resident.

use std::path::Path;

use ndarray::Array2;

use crate::dataset::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::model::ClassifierModel;
use crate::preprocess::{augment, resize_normalize, trim_border, BackboneProfile, NormalizedTensor, RasterImage, TrimPolicy};
use crate::tags::{canonicalize_tags, encode_multi_hot, MultiHotVector, SynonymMap, TagVocabulary};

/// One ready-to-train image with its labels.
#[derive(Debug, Clone)]
pub struct PreparedItem {
    pub record_id: String,
    raster: RasterImage,
    pub class_index: usize,
    pub tags: Option<MultiHotVector>,
}

impl PreparedItem {
    pub fn new(
        record_id: impl Into<String>,
        raster: RasterImage,
        class_index: usize,
        tags: Option<MultiHotVector>,
    ) -> Self {
        PreparedItem { record_id: record_id.into(), raster, class_index, tags }
    }

    pub fn raster(&self) -> &RasterImage {
        &self.raster
    }
}

/// Options for [`PreparedDataset::prepare`].
#[derive(Debug, Clone)]
pub struct PrepareOptions {
    /// Trim policy for records without a curator crop box.
    pub fallback_trim: TrimPolicy,
    /// Return the original image instead of erroring on degenerate crops.
    pub permissive_trim: bool,
    /// Materialize the three geometry variants for every train record.
    pub augment_train: bool,
    pub augment_seed: u64,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        PrepareOptions {
            fallback_trim: TrimPolicy::heuristic_default(),
            permissive_trim: false,
            augment_train: true,
            augment_seed: 0,
        }
    }
}

/// Counters from dataset preparation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PrepareStats {
    pub items: usize,
    pub augmented: usize,
    /// Tags outside the vocabulary, dropped while encoding labels.
    pub oov_tags_dropped: usize,
}

/// Fully prepared dataset for one backbone profile.
pub struct PreparedDataset {
    profile: BackboneProfile,
    items: Vec<PreparedItem>,
    train: Vec<usize>,
    validation: Vec<usize>,
    test: Vec<usize>,
    stats: PrepareStats,
}

impl PreparedDataset {
    /// Loads, trims, optionally augments, and resizes every assigned record
    /// of the manifest. Tag labels are encoded when a vocabulary is given.
    pub fn prepare(
        manifest: &DatasetManifest,
        profile: &BackboneProfile,
        images_root: &Path,
        vocab: Option<(&TagVocabulary, &SynonymMap)>,
        options: &PrepareOptions,
    ) -> Result<Self> {
        if manifest.has_unassigned() {
            let count = manifest.split_indices(Split::Unassigned).len();
            return Err(Error::UnassignedRecords { count });
        }
        let registry = manifest.registry();
        let mut items = Vec::new();
        let mut train = Vec::new();
        let mut validation = Vec::new();
        let mut test = Vec::new();
        let mut stats = PrepareStats::default();

        for (rec_pos, rec) in manifest.records().iter().enumerate() {
            let class_index = registry
                .index_of(&rec.class_label)
                .expect("registry covers manifest labels");
            let full_path = if rec.path.is_absolute() {
                rec.path.clone()
            } else {
                images_root.join(&rec.path)
            };
            let raw = RasterImage::open(&full_path)?;
            let policy = match rec.crop {
                Some(b) => TrimPolicy::ManifestBox(b),
                None => options.fallback_trim,
            };
            let trimmed = trim_border(&raw, &policy, options.permissive_trim)?;

            let tags = match vocab {
                Some((v, synonyms)) => {
                    let canonical = canonicalize_tags(&rec.raw_tags, synonyms);
                    let (bits, dropped) = encode_multi_hot(&canonical, v);
                    stats.oov_tags_dropped += dropped;
                    Some(bits)
                }
                None => None,
            };

            let side = profile.input_side;
            let idx = items.len();
            items.push(PreparedItem::new(
                rec.id.clone(),
                trimmed.resize(side, side)?,
                class_index,
                tags.clone(),
            ));
            match rec.split {
                Split::Train => train.push(idx),
                Split::Validation => validation.push(idx),
                Split::Test => test.push(idx),
                Split::Unassigned => unreachable!("checked above"),
            }

            if rec.split == Split::Train && options.augment_train {
                let seed = options
                    .augment_seed
                    .wrapping_add((rec_pos as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                for (k, variant) in augment(&trimmed, seed).into_iter().enumerate() {
                    let idx = items.len();
                    items.push(PreparedItem::new(
                        format!("{}#aug{}", rec.id, k),
                        variant.resize(side, side)?,
                        class_index,
                        tags.clone(),
                    ));
                    train.push(idx);
                    stats.augmented += 1;
                }
            }
        }

        stats.items = items.len();
        Ok(PreparedDataset { profile: profile.clone(), items, train, validation, test, stats })
    }

    /// Assembles a dataset from already-prepared items (synthetic tests,
    /// probe data).
    pub fn from_parts(
        profile: BackboneProfile,
        items: Vec<PreparedItem>,
        train: Vec<usize>,
        validation: Vec<usize>,
        test: Vec<usize>,
    ) -> Result<Self> {
        let n = items.len();
        for &i in train.iter().chain(&validation).chain(&test) {
            if i >= n {
                return Err(Error::ShapeMismatch(format!("split index {i} out of {n} items")));
            }
        }
        let stats = PrepareStats { items: n, ..Default::default() };
        Ok(PreparedDataset { profile, items, train, validation, test, stats })
    }

    pub fn profile(&self) -> &BackboneProfile {
        &self.profile
    }

    pub fn stats(&self) -> PrepareStats {
        self.stats
    }

    pub fn items(&self) -> &[PreparedItem] {
        &self.items
    }

    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
            Split::Unassigned => &[],
        }
    }

    pub fn tensor(&self, index: usize) -> Result<NormalizedTensor> {
        resize_normalize(&self.items[index].raster, &self.profile)
    }

    pub fn tensors(&self, indices: &[usize]) -> Result<Vec<NormalizedTensor>> {
        indices.iter().map(|&i| self.tensor(i)).collect()
    }

    pub fn class_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.items[i].class_index).collect()
    }

    pub fn tag_rows(&self, indices: &[usize]) -> Result<Vec<MultiHotVector>> {
        indices
            .iter()
            .map(|&i| {
                self.items[i].tags.clone().ok_or_else(|| {
                    Error::InvalidConfig(
                        "dataset was prepared without a tag vocabulary".into(),
                    )
                })
            })
            .collect()
    }

    pub fn record_ids(&self, indices: &[usize]) -> Vec<String> {
        indices.iter().map(|&i| self.items[i].record_id.clone()).collect()
    }
}

/// Evaluation batch size for plain forward passes.
const EVAL_BATCH: usize = 64;

/// Argmax predictions and truths for one split.
pub fn predict_split_classes(
    model: &ClassifierModel,
    data: &PreparedDataset,
    split: Split,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let indices = data.indices(split);
    if indices.is_empty() {
        return Err(Error::EmptySplit(split.as_str().into()));
    }
    let mut preds = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        let tensors = data.tensors(chunk)?;
        let probs = model.forward(&tensors)?;
        for row in probs.rows() {
            preds.push(crate::model::ProbabilityVector::new(row.to_vec()).argmax());
        }
    }
    Ok((preds, data.class_labels(indices)))
}

/// Score and label matrices (rows = images, columns = tags) for one split.
pub fn score_split_tags(
    model: &ClassifierModel,
    data: &PreparedDataset,
    split: Split,
) -> Result<(Array2<f64>, Array2<u8>)> {
    let indices = data.indices(split);
    if indices.is_empty() {
        return Err(Error::EmptySplit(split.as_str().into()));
    }
    let t = model.output_dim();
    let mut scores = Array2::<f64>::zeros((indices.len(), t));
    let mut labels = Array2::<u8>::zeros((indices.len(), t));
    let rows = data.tag_rows(indices)?;
    let mut row_idx = 0usize;
    for chunk in indices.chunks(EVAL_BATCH) {
        let tensors = data.tensors(chunk)?;
        let probs = model.forward(&tensors)?;
        for local in 0..chunk.len() {
            for j in 0..t {
                scores[[row_idx, j]] = probs[[local, j]];
                labels[[row_idx, j]] = rows[row_idx].bits()[j];
            }
            row_idx += 1;
        }
    }
    Ok((scores, labels))
}

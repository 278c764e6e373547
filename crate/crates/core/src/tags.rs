//! Tag canonicalization, the fixed vocabulary, and multi-hot encoding.
//!
//! Raw tag strings go through normalization (lowercase, trim, whitespace to
//! underscores) and synonym replacement before they ever touch the label
//! space. The vocabulary is built from the train split only and freezes the
//! multi-hot index order.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, Split};
use crate::error::{Error, Result};

/// Normalizes a surface form: trim, lowercase, whitespace runs to `_`.
pub fn normalize_surface(raw: &str) -> String {
    raw.trim()
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join("_")
}

/// Surface form -> canonical tag replacement table.
///
/// Canonical tags are fixed points: looking up a canonical tag returns
/// itself. Lookups are case-insensitive after whitespace normalization.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymMap {
    entries: HashMap<String, String>,
}

impl SynonymMap {
    pub fn new() -> Self {
        SynonymMap::default()
    }

    /// Builds a map from `(surface, canonical)` pairs, normalizing both sides
    /// and rejecting maps whose canonical tags are themselves remapped.
    pub fn from_pairs<I, A, B>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (A, B)>,
        A: AsRef<str>,
        B: AsRef<str>,
    {
        let mut entries = HashMap::new();
        for (surface, canonical) in pairs {
            let surface = normalize_surface(surface.as_ref());
            let canonical = normalize_surface(canonical.as_ref());
            if surface.is_empty() || canonical.is_empty() {
                return Err(Error::SynonymMap {
                    line: 0,
                    message: "empty surface form or canonical tag".into(),
                });
            }
            entries.insert(surface, canonical);
        }
        let map = SynonymMap { entries };
        map.check_fixed_points()?;
        Ok(map)
    }

    fn check_fixed_points(&self) -> Result<()> {
        for canonical in self.entries.values() {
            if let Some(target) = self.entries.get(canonical) {
                if target != canonical {
                    return Err(Error::SynonymMap {
                        line: 0,
                        message: format!(
                            "canonical tag '{canonical}' is remapped to '{target}'"
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    /// Parses the `surface_form -> canonical_tag` line format. Blank lines
    /// and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (surface, canonical) = line.split_once("->").ok_or(Error::SynonymMap {
                line: idx + 1,
                message: "expected `surface_form -> canonical_tag`".into(),
            })?;
            if surface.trim().is_empty() || canonical.trim().is_empty() {
                return Err(Error::SynonymMap {
                    line: idx + 1,
                    message: "empty surface form or canonical tag".into(),
                });
            }
            pairs.push((surface.to_string(), canonical.to_string()));
        }
        Self::from_pairs(pairs)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut lines: Vec<_> = self
            .entries
            .iter()
            .map(|(s, c)| format!("{s} -> {c}"))
            .collect();
        lines.sort();
        std::fs::write(path, lines.join("\n") + "\n")
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Canonical form of one raw tag: normalize, then replace if mapped.
    pub fn apply(&self, raw: &str) -> String {
        let normalized = normalize_surface(raw);
        match self.entries.get(&normalized) {
            Some(canonical) => canonical.clone(),
            None => normalized,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Canonicalizes a raw tag list: normalize, synonym-replace, deduplicate.
/// Empty results of normalization are dropped.
pub fn canonicalize_tags<S: AsRef<str>>(raw: &[S], synonyms: &SynonymMap) -> BTreeSet<String> {
    raw.iter()
        .map(|t| synonyms.apply(t.as_ref()))
        .filter(|t| !t.is_empty())
        .collect()
}

/// Ordered canonical tag list fixing the multi-hot index order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagVocabulary {
    tags: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

/// Counters reported by [`build_vocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabBuildStats {
    /// Distinct canonical tags seen in the train split.
    pub distinct_tags: usize,
    /// Tags cut because the vocabulary was capped at `max_size`.
    pub truncated: usize,
}

impl TagVocabulary {
    pub fn from_tags<I, S>(tags: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut list = Vec::new();
        let mut index = HashMap::new();
        for tag in tags {
            let tag: String = tag.into();
            if index.contains_key(&tag) {
                return Err(Error::DuplicateTag(tag));
            }
            index.insert(tag.clone(), list.len());
            list.push(tag);
        }
        if list.is_empty() {
            return Err(Error::EmptyVocabulary);
        }
        Ok(TagVocabulary { tags: list, index })
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn index_of(&self, tag: &str) -> Option<usize> {
        self.index.get(tag).copied()
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn content_hash(&self) -> String {
        crate::hash_lines(self.tags.iter().map(String::as_str))
    }

    /// One canonical tag per line; line number = multi-hot index.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.tags.join("\n") + "\n")
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_tags(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from))
    }

    /// Restores the lookup index after deserialization.
    pub fn restore_index(&mut self) {
        self.index = self
            .tags
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }
}

/// Builds the vocabulary from the train split's canonicalized tags, ordered
/// by descending corpus frequency then lexicographically, capped at
/// `max_size` (the cut count is reported in the stats).
pub fn build_vocabulary(
    manifest: &DatasetManifest,
    synonyms: &SynonymMap,
    max_size: usize,
) -> Result<(TagVocabulary, VocabBuildStats)> {
    let mut freq: HashMap<String, usize> = HashMap::new();
    for rec in manifest.records() {
        if rec.split != Split::Train {
            continue;
        }
        for tag in canonicalize_tags(&rec.raw_tags, synonyms) {
            *freq.entry(tag).or_insert(0) += 1;
        }
    }
    if freq.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    let distinct = freq.len();
    let mut ranked: Vec<(String, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let truncated = ranked.len().saturating_sub(max_size);
    ranked.truncate(max_size);
    let vocab = TagVocabulary::from_tags(ranked.into_iter().map(|(t, _)| t))?;
    Ok((vocab, VocabBuildStats { distinct_tags: distinct, truncated }))
}

/// Binary tag-presence vector over a vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiHotVector {
    bits: Vec<u8>,
}

impl MultiHotVector {
    pub fn zeros(len: usize) -> Self {
        MultiHotVector { bits: vec![0; len] }
    }

    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidLabel("multi-hot entries must be 0 or 1".into()));
        }
        Ok(MultiHotVector { bits })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }
}

/// Encodes a tag set as a multi-hot vector. Tags outside the vocabulary are
/// dropped; the number dropped is returned alongside the vector.
pub fn encode_multi_hot(tags: &BTreeSet<String>, vocab: &TagVocabulary) -> (MultiHotVector, usize) {
    let mut bits = vec![0u8; vocab.len()];
    let mut dropped = 0usize;
    for tag in tags {
        match vocab.index_of(tag) {
            Some(i) => bits[i] = 1,
            None => dropped += 1,
        }
    }
    (MultiHotVector { bits }, dropped)
}

/// Decodes a multi-hot vector back to its tag set.
pub fn decode_multi_hot(vector: &MultiHotVector, vocab: &TagVocabulary) -> Result<BTreeSet<String>> {
    if vector.len() != vocab.len() {
        return Err(Error::VectorLengthMismatch { got: vector.len(), expected: vocab.len() });
    }
    Ok(vector
        .bits
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == 1)
        .map(|(i, _)| vocab.tags[i].clone())
        .collect())
}

/// Pluggable source of raw tag suggestions for an image.
///
/// The production pipeline consumes curated tag lists; this interface exists
/// so a generator can be swapped in. The default implementation is a
/// deterministic stub that tokenizes the file name.
pub trait TagSuggester {
    fn suggest_tags(&self, image_path: &Path) -> Vec<String>;
}

/// Deterministic stub suggester: splits the file stem on non-alphanumeric
/// characters and returns the normalized tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct FilenameTokenSuggester;

impl TagSuggester for FilenameTokenSuggester {
    fn suggest_tags(&self, image_path: &Path) -> Vec<String> {
        let stem = image_path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_default();
        stem.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(normalize_surface)
            .collect()
    }
}

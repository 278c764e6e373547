//! C ABI for the folktalent toolkit.
//!
//! Handles are opaque pointers owned by Rust; every constructor has a
//! matching `_free`. Functions return [`FtStatus`]; on any non-`Ok` status
//! the thread-local message from [`ft_last_error_message`] describes the
//! failure. Strings returned through out-pointers are owned by the caller
//! and must be released with [`ft_string_free`].

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};

use libc::{c_char, size_t};

use folktalent::error::Error;
use folktalent::evaluate;
use folktalent::model::{load_checkpoint, predict_class, predict_tags, LoadedCheckpoint, TaskKind};
use folktalent::preprocess::{resize_normalize, trim_border, RasterImage, TrimPolicy};
use folktalent::tags::{encode_multi_hot, normalize_surface, SynonymMap, TagVocabulary};

/// Result codes returned by every fallible function.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    IoError = 4,
    Incompatible = 5,
    InternalError = 6,
}

/// Task stored in a checkpoint.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FtTask {
    Multiclass = 0,
    Multilabel = 1,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: impl Into<String>) {
    let message = message.into().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(message).unwrap_or_default();
    });
}

fn fail(status: FtStatus, message: impl Into<String>) -> FtStatus {
    set_error(message);
    status
}

fn fail_with(err: Error) -> FtStatus {
    let status = match &err {
        Error::Io { .. }
        | Error::ImageDecode { .. }
        | Error::ImageEncode { .. }
        | Error::MissingArtifact { .. } => FtStatus::IoError,
        Error::Format { .. } | Error::IncompatibleCheckpoint(_) => FtStatus::Incompatible,
        _ => FtStatus::InvalidArgument,
    };
    set_error(err.to_string());
    status
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ft_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string; never freed.
#[no_mangle]
pub extern "C" fn ft_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Releases a string returned through an out-pointer.
///
/// # Safety
/// `s` must be a pointer previously returned by this library and not yet
/// freed; null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn ft_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

unsafe fn path_from(ptr: *const c_char, what: &str) -> Result<PathBuf, FtStatus> {
    str_from(ptr, what).map(PathBuf::from)
}

unsafe fn str_from(ptr: *const c_char, what: &str) -> Result<String, FtStatus> {
    if ptr.is_null() {
        return Err(fail(FtStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map(str::to_string)
        .map_err(|_| fail(FtStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

fn give_string(value: &str, out: *mut *mut c_char) -> FtStatus {
    if out.is_null() {
        return fail(FtStatus::NullPointer, "out pointer is null");
    }
    match CString::new(value) {
        Ok(s) => {
            unsafe { *out = s.into_raw() };
            FtStatus::Ok
        }
        Err(_) => fail(FtStatus::InternalError, "string contains an interior NUL"),
    }
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Opaque tag vocabulary handle.
pub struct FtVocabulary {
    inner: TagVocabulary,
}

/// Loads a vocabulary file (one canonical tag per line).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ft_vocabulary_load(
    path: *const c_char,
    out: *mut *mut FtVocabulary,
) -> FtStatus {
    if out.is_null() {
        return fail(FtStatus::NullPointer, "out pointer is null");
    }
    let path = match path_from(path, "path") {
        Ok(p) => p,
        Err(status) => return status,
    };
    match TagVocabulary::from_file(&path) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(FtVocabulary { inner }));
            FtStatus::Ok
        }
        Err(e) => fail_with(e),
    }
}

/// # Safety
/// `vocabulary` must come from [`ft_vocabulary_load`]; null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn ft_vocabulary_free(vocabulary: *mut FtVocabulary) {
    if !vocabulary.is_null() {
        drop(Box::from_raw(vocabulary));
    }
}

/// Number of tags; 0 for a null handle.
///
/// # Safety
/// `vocabulary` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ft_vocabulary_len(vocabulary: *const FtVocabulary) -> size_t {
    if vocabulary.is_null() {
        return 0;
    }
    (*vocabulary).inner.len()
}

/// Copies the tag at `index` into a caller-owned string.
///
/// # Safety
/// `vocabulary` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ft_vocabulary_tag_at(
    vocabulary: *const FtVocabulary,
    index: size_t,
    out: *mut *mut c_char,
) -> FtStatus {
    if vocabulary.is_null() {
        return fail(FtStatus::NullPointer, "vocabulary handle is null");
    }
    let vocab = &(*vocabulary).inner;
    match vocab.tags().get(index) {
        Some(tag) => give_string(tag, out),
        None => fail(
            FtStatus::InvalidArgument,
            format!("index {index} out of range for {} tags", vocab.len()),
        ),
    }
}

/// Encodes a tag list as a multi-hot vector over the vocabulary.
///
/// `bits` must hold `ft_vocabulary_len` bytes; each is set to 0 or 1. Tags
/// outside the vocabulary are dropped; their count lands in `dropped_out`
/// (pass null to ignore).
///
/// # Safety
/// `tags` must point to `n_tags` NUL-terminated strings; `bits` must hold
/// at least `bits_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ft_vocabulary_encode(
    vocabulary: *const FtVocabulary,
    tags: *const *const c_char,
    n_tags: size_t,
    bits: *mut u8,
    bits_len: size_t,
    dropped_out: *mut size_t,
) -> FtStatus {
    if vocabulary.is_null() {
        return fail(FtStatus::NullPointer, "vocabulary handle is null");
    }
    if n_tags > 0 && tags.is_null() {
        return fail(FtStatus::NullPointer, "tags pointer is null");
    }
    if bits.is_null() {
        return fail(FtStatus::NullPointer, "bits pointer is null");
    }
    let vocab = &(*vocabulary).inner;
    if bits_len < vocab.len() {
        return fail(
            FtStatus::InvalidArgument,
            format!(
                "bits buffer holds {bits_len} bytes but the vocabulary has {} tags",
                vocab.len()
            ),
        );
    }
    let mut set = BTreeSet::new();
    for i in 0..n_tags {
        match str_from(*tags.add(i), "tag") {
            Ok(tag) => {
                set.insert(tag);
            }
            Err(status) => return status,
        }
    }
    let (vector, dropped) = encode_multi_hot(&set, vocab);
    std::ptr::copy_nonoverlapping(vector.bits().as_ptr(), bits, vocab.len());
    if !dropped_out.is_null() {
        *dropped_out = dropped;
    }
    FtStatus::Ok
}

// ---------------------------------------------------------------------------
// Synonym map and normalization
// ---------------------------------------------------------------------------

/// Opaque synonym map handle.
pub struct FtSynonymMap {
    inner: SynonymMap,
}

/// Loads a synonym map (`surface_form -> canonical_tag` lines).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ft_synonyms_load(
    path: *const c_char,
    out: *mut *mut FtSynonymMap,
) -> FtStatus {
    if out.is_null() {
        return fail(FtStatus::NullPointer, "out pointer is null");
    }
    let path = match path_from(path, "path") {
        Ok(p) => p,
        Err(status) => return status,
    };
    match SynonymMap::from_file(&path) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(FtSynonymMap { inner }));
            FtStatus::Ok
        }
        Err(e) => fail_with(e),
    }
}

/// # Safety
/// `map` must come from [`ft_synonyms_load`]; null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn ft_synonyms_free(map: *mut FtSynonymMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Canonicalizes one raw tag: normalization plus synonym replacement. Pass
/// a null map for normalization only.
///
/// # Safety
/// `raw` must be NUL-terminated; `map` must be a live handle or null;
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ft_canonicalize_tag(
    map: *const FtSynonymMap,
    raw: *const c_char,
    out: *mut *mut c_char,
) -> FtStatus {
    let raw = match str_from(raw, "raw tag") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let canonical = if map.is_null() {
        normalize_surface(&raw)
    } else {
        (*map).inner.apply(&raw)
    };
    give_string(&canonical, out)
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

/// Opaque fine-tuned model handle (checkpoint plus its label space).
pub struct FtModel {
    inner: LoadedCheckpoint,
}

/// Loads a checkpoint file written by the `train` stage.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ft_model_load(path: *const c_char, out: *mut *mut FtModel) -> FtStatus {
    if out.is_null() {
        return fail(FtStatus::NullPointer, "out pointer is null");
    }
    let path = match path_from(path, "path") {
        Ok(p) => p,
        Err(status) => return status,
    };
    match load_checkpoint(&path) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(FtModel { inner }));
            FtStatus::Ok
        }
        Err(e) => fail_with(e),
    }
}

/// # Safety
/// `model` must come from [`ft_model_load`]; null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn ft_model_free(model: *mut FtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Task the checkpoint was trained for.
///
/// # Safety
/// `model` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ft_model_task(model: *const FtModel, out: *mut FtTask) -> FtStatus {
    if model.is_null() {
        return fail(FtStatus::NullPointer, "model handle is null");
    }
    if out.is_null() {
        return fail(FtStatus::NullPointer, "out pointer is null");
    }
    *out = match (*model).inner.model.task() {
        TaskKind::Multiclass => FtTask::Multiclass,
        TaskKind::Multilabel => FtTask::Multilabel,
    };
    FtStatus::Ok
}

fn load_tensor(
    model: &LoadedCheckpoint,
    image_path: &Path,
) -> Result<folktalent::preprocess::NormalizedTensor, FtStatus> {
    let image = RasterImage::open(image_path).map_err(fail_with)?;
    let trimmed = trim_border(&image, &TrimPolicy::heuristic_default(), true).map_err(fail_with)?;
    resize_normalize(&trimmed, model.model.backbone().profile()).map_err(fail_with)
}

/// Classifies an image file, writing the class name to `out`.
///
/// # Safety
/// `model` must be a live multiclass handle; `image_path` NUL-terminated;
/// `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ft_model_predict_class(
    model: *const FtModel,
    image_path: *const c_char,
    out: *mut *mut c_char,
) -> FtStatus {
    if model.is_null() {
        return fail(FtStatus::NullPointer, "model handle is null");
    }
    let loaded = &(*model).inner;
    let image_path = match path_from(image_path, "image path") {
        Ok(p) => p,
        Err(status) => return status,
    };
    let registry = match loaded.label_space.registry() {
        Ok(r) => r,
        Err(e) => return fail_with(e),
    };
    let tensor = match load_tensor(loaded, &image_path) {
        Ok(t) => t,
        Err(status) => return status,
    };
    match predict_class(&loaded.model, &tensor, &registry) {
        Ok(class) => give_string(&class, out),
        Err(e) => fail_with(e),
    }
}

/// Tags an image file. The result is a `;`-joined list (empty string when
/// no score exceeds the threshold).
///
/// # Safety
/// `model` must be a live multilabel handle; `image_path` NUL-terminated;
/// `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ft_model_predict_tags(
    model: *const FtModel,
    image_path: *const c_char,
    threshold: f64,
    out: *mut *mut c_char,
) -> FtStatus {
    if model.is_null() {
        return fail(FtStatus::NullPointer, "model handle is null");
    }
    let loaded = &(*model).inner;
    let image_path = match path_from(image_path, "image path") {
        Ok(p) => p,
        Err(status) => return status,
    };
    let vocab = match loaded.label_space.vocabulary() {
        Ok(v) => v,
        Err(e) => return fail_with(e),
    };
    let tensor = match load_tensor(loaded, &image_path) {
        Ok(t) => t,
        Err(status) => return status,
    };
    match predict_tags(&loaded.model, &tensor, &vocab, threshold) {
        Ok(tags) => {
            let joined = tags.iter().map(String::as_str).collect::<Vec<_>>().join(";");
            give_string(&joined, out)
        }
        Err(e) => fail_with(e),
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Overall accuracy as a percentage.
///
/// # Safety
/// `predictions` and `truths` must each hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn ft_accuracy(
    predictions: *const u32,
    truths: *const u32,
    len: size_t,
    out: *mut f64,
) -> FtStatus {
    if predictions.is_null() || truths.is_null() || out.is_null() {
        return fail(FtStatus::NullPointer, "accuracy inputs must not be null");
    }
    let preds: Vec<usize> =
        std::slice::from_raw_parts(predictions, len).iter().map(|&v| v as usize).collect();
    let truth: Vec<usize> =
        std::slice::from_raw_parts(truths, len).iter().map(|&v| v as usize).collect();
    match evaluate::accuracy(&preds, &truth) {
        Ok(acc) => {
            *out = acc;
            FtStatus::Ok
        }
        Err(e) => fail_with(e),
    }
}

/// Average precision (in [0, 1]) of one score/label ranking.
///
/// # Safety
/// `scores` and `labels` must each hold `len` values; labels are 0 or 1.
#[no_mangle]
pub unsafe extern "C" fn ft_average_precision(
    scores: *const f64,
    labels: *const u8,
    len: size_t,
    out: *mut f64,
) -> FtStatus {
    if scores.is_null() || labels.is_null() || out.is_null() {
        return fail(FtStatus::NullPointer, "average precision inputs must not be null");
    }
    let scores = std::slice::from_raw_parts(scores, len);
    let labels = std::slice::from_raw_parts(labels, len);
    match evaluate::average_precision(scores, labels) {
        Ok(ap) => {
            *out = ap;
            FtStatus::Ok
        }
        Err(e) => fail_with(e),
    }
}

/// Macro mAP (percentage) over a row-major `n_samples x n_tags` score
/// matrix. Tags with no positive label are excluded; their count lands in
/// `excluded_out` (pass null to ignore).
///
/// # Safety
/// `scores` must hold `n_samples * n_tags` doubles and `labels` as many
/// bytes (0 or 1).
#[no_mangle]
pub unsafe extern "C" fn ft_mean_average_precision(
    scores: *const f64,
    labels: *const u8,
    n_samples: size_t,
    n_tags: size_t,
    out: *mut f64,
    excluded_out: *mut size_t,
) -> FtStatus {
    if scores.is_null() || labels.is_null() || out.is_null() {
        return fail(FtStatus::NullPointer, "mAP inputs must not be null");
    }
    let total = n_samples * n_tags;
    let score_matrix = match ndarray::Array2::from_shape_vec(
        (n_samples, n_tags),
        std::slice::from_raw_parts(scores, total).to_vec(),
    ) {
        Ok(m) => m,
        Err(e) => return fail(FtStatus::InvalidArgument, e.to_string()),
    };
    let label_matrix = match ndarray::Array2::from_shape_vec(
        (n_samples, n_tags),
        std::slice::from_raw_parts(labels, total).to_vec(),
    ) {
        Ok(m) => m,
        Err(e) => return fail(FtStatus::InvalidArgument, e.to_string()),
    };
    match evaluate::mean_average_precision(&score_matrix, &label_matrix) {
        Ok(report) => {
            *out = report.map;
            if !excluded_out.is_null() {
                *excluded_out = report.excluded_tags;
            }
            FtStatus::Ok
        }
        Err(e) => fail_with(e),
    }
}

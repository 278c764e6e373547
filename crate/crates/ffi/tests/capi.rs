//! Exercises the C ABI the way a foreign binding would: raw pointers,
//! status codes, and explicit frees.

use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use folktalent::model::{
    save_checkpoint, ClassifierModel, LabelSpace, TaskKind, TinyPatchBackbone, TrainingMeta,
};
use folktalent::preprocess::RasterImage;
use folktalent_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

unsafe fn take_string(ptr: *mut libc::c_char) -> String {
    assert!(!ptr.is_null());
    let s = CStr::from_ptr(ptr).to_str().unwrap().to_string();
    ft_string_free(ptr);
    s
}

unsafe fn last_error() -> String {
    CStr::from_ptr(ft_last_error_message()).to_str().unwrap().to_string()
}

fn write_vocab(dir: &Path) -> CString {
    let path = dir.join("vocab.txt");
    std::fs::write(&path, "Sun\nStars\nLotus\nCow\nLizard\n").unwrap();
    c(path.to_str().unwrap())
}

#[test]
fn version_is_a_static_string() {
    let v = unsafe { CStr::from_ptr(ft_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn vocabulary_load_encode_and_free() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_vocab(dir.path());
    unsafe {
        let mut vocab: *mut FtVocabulary = ptr::null_mut();
        assert_eq!(ft_vocabulary_load(path.as_ptr(), &mut vocab), FtStatus::Ok);
        assert_eq!(ft_vocabulary_len(vocab), 5);

        let mut tag: *mut libc::c_char = ptr::null_mut();
        assert_eq!(ft_vocabulary_tag_at(vocab, 3, &mut tag), FtStatus::Ok);
        assert_eq!(take_string(tag), "Cow");
        assert_eq!(
            ft_vocabulary_tag_at(vocab, 9, &mut tag),
            FtStatus::InvalidArgument
        );

        // Table row: {Sun, Stars, Cow} -> 1 1 0 1 0; an unknown tag counts
        // as dropped.
        let tags = [c("Sun"), c("Stars"), c("Cow"), c("Comet")];
        let tag_ptrs: Vec<*const libc::c_char> = tags.iter().map(|t| t.as_ptr()).collect();
        let mut bits = [9u8; 5];
        let mut dropped: usize = 0;
        assert_eq!(
            ft_vocabulary_encode(
                vocab,
                tag_ptrs.as_ptr(),
                tag_ptrs.len(),
                bits.as_mut_ptr(),
                bits.len(),
                &mut dropped,
            ),
            FtStatus::Ok
        );
        assert_eq!(bits, [1, 1, 0, 1, 0]);
        assert_eq!(dropped, 1);

        // Undersized buffer is rejected before any write.
        let mut small = [0u8; 2];
        assert_eq!(
            ft_vocabulary_encode(
                vocab,
                tag_ptrs.as_ptr(),
                tag_ptrs.len(),
                small.as_mut_ptr(),
                small.len(),
                ptr::null_mut(),
            ),
            FtStatus::InvalidArgument
        );
        assert!(last_error().contains("bits buffer"));

        ft_vocabulary_free(vocab);
    }
}

#[test]
fn missing_files_set_io_status_and_message() {
    unsafe {
        let mut vocab: *mut FtVocabulary = ptr::null_mut();
        let path = c("/nonexistent/vocab.txt");
        assert_eq!(ft_vocabulary_load(path.as_ptr(), &mut vocab), FtStatus::IoError);
        assert!(last_error().contains("vocab.txt"), "message: {}", last_error());

        let mut model: *mut FtModel = ptr::null_mut();
        let path = c("/nonexistent/model.ckpt.json");
        assert_eq!(ft_model_load(path.as_ptr(), &mut model), FtStatus::IoError);
        assert!(last_error().contains("folktalent train"), "message: {}", last_error());
    }
}

#[test]
fn null_pointers_are_rejected_not_dereferenced() {
    unsafe {
        assert_eq!(
            ft_vocabulary_load(ptr::null(), ptr::null_mut()),
            FtStatus::NullPointer
        );
        let mut out = 0.0f64;
        assert_eq!(
            ft_accuracy(ptr::null(), ptr::null(), 3, &mut out),
            FtStatus::NullPointer
        );
        ft_vocabulary_free(ptr::null_mut());
        ft_model_free(ptr::null_mut());
        ft_synonyms_free(ptr::null_mut());
        ft_string_free(ptr::null_mut());
    }
}

#[test]
fn synonym_canonicalization_through_the_abi() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("syn.txt");
    std::fs::write(&path, "festivity -> celebration\nfeast -> celebration\n").unwrap();
    let path = c(path.to_str().unwrap());
    unsafe {
        let mut map: *mut FtSynonymMap = ptr::null_mut();
        assert_eq!(ft_synonyms_load(path.as_ptr(), &mut map), FtStatus::Ok);

        let raw = c("  Festivity ");
        let mut out: *mut libc::c_char = ptr::null_mut();
        assert_eq!(ft_canonicalize_tag(map, raw.as_ptr(), &mut out), FtStatus::Ok);
        assert_eq!(take_string(out), "celebration");

        // Null map means normalization only.
        let raw = c("Dark  Brown Background");
        assert_eq!(ft_canonicalize_tag(ptr::null(), raw.as_ptr(), &mut out), FtStatus::Ok);
        assert_eq!(take_string(out), "dark_brown_background");

        ft_synonyms_free(map);
    }
}

#[test]
fn metrics_match_the_library_values() {
    unsafe {
        let preds: [u32; 4] = [0, 1, 2, 2];
        let truths: [u32; 4] = [0, 1, 2, 1];
        let mut acc = 0.0f64;
        assert_eq!(
            ft_accuracy(preds.as_ptr(), truths.as_ptr(), 4, &mut acc),
            FtStatus::Ok
        );
        assert!((acc - 75.0).abs() < 1e-12);

        let scores = [0.9, 0.8, 0.7];
        let labels = [1u8, 0, 1];
        let mut ap = 0.0f64;
        assert_eq!(
            ft_average_precision(scores.as_ptr(), labels.as_ptr(), 3, &mut ap),
            FtStatus::Ok
        );
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);

        // No positives at all: undefined.
        let zeros = [0u8, 0, 0];
        assert_eq!(
            ft_average_precision(scores.as_ptr(), zeros.as_ptr(), 3, &mut ap),
            FtStatus::InvalidArgument
        );

        // Two tags with APs 1.0 and 0.5 -> 75%.
        let score_matrix = [0.9, 0.9, 0.1, 0.8];
        let label_matrix = [1u8, 0, 0, 1];
        let mut map = 0.0f64;
        let mut excluded = 99usize;
        assert_eq!(
            ft_mean_average_precision(
                score_matrix.as_ptr(),
                label_matrix.as_ptr(),
                2,
                2,
                &mut map,
                &mut excluded,
            ),
            FtStatus::Ok
        );
        assert!((map - 75.0).abs() < 1e-9);
        assert_eq!(excluded, 0);
    }
}

#[test]
fn model_predicts_through_the_abi() {
    let dir = tempfile::tempdir().unwrap();

    // A multiclass checkpoint over three classes.
    let backbone = TinyPatchBackbone::new(2, 32, true, 3).unwrap();
    let model = ClassifierModel::new(Box::new(backbone), TaskKind::Multiclass, 3, 5).unwrap();
    let labels = LabelSpace::Classes(vec!["alpha".into(), "beta".into(), "gamma".into()]);
    let ckpt_path = dir.path().join("model.ckpt.json");
    let meta = TrainingMeta {
        seed: 3,
        best_epoch: 1,
        best_metric: 50.0,
        monitor: "validation_metric".into(),
        timestamp: "2025-01-01T00:00:00Z".into(),
    };
    save_checkpoint(&ckpt_path, &model, &labels, meta.clone()).unwrap();

    // A multilabel checkpoint with all-zero weights: every sigmoid score is
    // exactly 0.5, so no tag exceeds the default threshold.
    let backbone = TinyPatchBackbone::new(2, 32, true, 3).unwrap();
    let mut tag_model =
        ClassifierModel::new(Box::new(backbone), TaskKind::Multilabel, 2, 5).unwrap();
    tag_model.set_parameters(&vec![0.0; tag_model.param_count()]).unwrap();
    let tag_labels = LabelSpace::Tags(vec!["sun".into(), "moon".into()]);
    let tag_path = dir.path().join("tags.ckpt.json");
    save_checkpoint(&tag_path, &tag_model, &tag_labels, meta).unwrap();

    let image_path = dir.path().join("probe.png");
    RasterImage::filled(32, 32, [180, 40, 90]).unwrap().save(&image_path).unwrap();

    unsafe {
        let mut handle: *mut FtModel = ptr::null_mut();
        let p = c(ckpt_path.to_str().unwrap());
        assert_eq!(ft_model_load(p.as_ptr(), &mut handle), FtStatus::Ok);

        let mut task = FtTask::Multilabel;
        assert_eq!(ft_model_task(handle, &mut task), FtStatus::Ok);
        assert_eq!(task, FtTask::Multiclass);

        let img = c(image_path.to_str().unwrap());
        let mut out: *mut libc::c_char = ptr::null_mut();
        assert_eq!(ft_model_predict_class(handle, img.as_ptr(), &mut out), FtStatus::Ok);
        let class = take_string(out);
        assert!(["alpha", "beta", "gamma"].contains(&class.as_str()), "got {class}");

        // Tag prediction on a multiclass model is an incompatibility.
        assert_eq!(
            ft_model_predict_tags(handle, img.as_ptr(), 0.5, &mut out),
            FtStatus::Incompatible
        );
        assert!(last_error().contains("class roster"), "message: {}", last_error());
        ft_model_free(handle);

        let mut tags_handle: *mut FtModel = ptr::null_mut();
        let p = c(tag_path.to_str().unwrap());
        assert_eq!(ft_model_load(p.as_ptr(), &mut tags_handle), FtStatus::Ok);
        assert_eq!(
            ft_model_predict_tags(tags_handle, img.as_ptr(), 0.5, &mut out),
            FtStatus::Ok
        );
        assert_eq!(take_string(out), "", "0.5 scores must not exceed the 0.5 threshold");
        ft_model_free(tags_handle);
    }
}

/* C ABI for the folktalent toolkit. */

#ifndef FOLKTALENT_H
#define FOLKTALENT_H

/* Generated by cbindgen from folktalent-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes returned by every fallible function.
 */
enum FtStatus
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  FtStatus_Ok = 0,
  FtStatus_NullPointer = 1,
  FtStatus_InvalidUtf8 = 2,
  FtStatus_InvalidArgument = 3,
  FtStatus_IoError = 4,
  FtStatus_Incompatible = 5,
  FtStatus_InternalError = 6,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum FtStatus FtStatus;
#else
typedef int32_t FtStatus;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

/**
 * Task stored in a checkpoint.
 */
enum FtTask
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  FtTask_Multiclass = 0,
  FtTask_Multilabel = 1,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum FtTask FtTask;
#else
typedef int32_t FtTask;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

/**
 * Opaque fine-tuned model handle (checkpoint plus its label space).
 */
typedef struct FtModel FtModel;

/**
 * Opaque synonym map handle.
 */
typedef struct FtSynonymMap FtSynonymMap;

/**
 * Opaque tag vocabulary handle.
 */
typedef struct FtVocabulary FtVocabulary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *ft_last_error_message(void);

/**
 * Library version as a static string; never freed.
 */
const char *ft_version(void);

/**
 * Releases a string returned through an out-pointer.
 *
 * # Safety
 * `s` must be a pointer previously returned by this library and not yet
 * freed; null is a no-op.
 */
void ft_string_free(char *s);

/**
 * Loads a vocabulary file (one canonical tag per line).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
FtStatus ft_vocabulary_load(const char *path, struct FtVocabulary **out);

/**
 * # Safety
 * `vocabulary` must come from [`ft_vocabulary_load`]; null is a no-op.
 */
void ft_vocabulary_free(struct FtVocabulary *vocabulary);

/**
 * Number of tags; 0 for a null handle.
 *
 * # Safety
 * `vocabulary` must be a live handle or null.
 */
size_t ft_vocabulary_len(const struct FtVocabulary *vocabulary);

/**
 * Copies the tag at `index` into a caller-owned string.
 *
 * # Safety
 * `vocabulary` must be a live handle; `out` must be valid.
 */
FtStatus ft_vocabulary_tag_at(const struct FtVocabulary *vocabulary, size_t index, char **out);

/**
 * Encodes a tag list as a multi-hot vector over the vocabulary.
 *
 * `bits` must hold `ft_vocabulary_len` bytes; each is set to 0 or 1. Tags
 * outside the vocabulary are dropped; their count lands in `dropped_out`
 * (pass null to ignore).
 *
 * # Safety
 * `tags` must point to `n_tags` NUL-terminated strings; `bits` must hold
 * at least `bits_len` bytes.
 */
FtStatus ft_vocabulary_encode(const struct FtVocabulary *vocabulary,
                              const char *const *tags,
                              size_t n_tags,
                              uint8_t *bits,
                              size_t bits_len,
                              size_t *dropped_out);

/**
 * Loads a synonym map (`surface_form -> canonical_tag` lines).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid.
 */
FtStatus ft_synonyms_load(const char *path, struct FtSynonymMap **out);

/**
 * # Safety
 * `map` must come from [`ft_synonyms_load`]; null is a no-op.
 */
void ft_synonyms_free(struct FtSynonymMap *map);

/**
 * Canonicalizes one raw tag: normalization plus synonym replacement. Pass
 * a null map for normalization only.
 *
 * # Safety
 * `raw` must be NUL-terminated; `map` must be a live handle or null;
 * `out` must be valid.
 */
FtStatus ft_canonicalize_tag(const struct FtSynonymMap *map, const char *raw, char **out);

/**
 * Loads a checkpoint file written by the `train` stage.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be valid.
 */
FtStatus ft_model_load(const char *path, struct FtModel **out);

/**
 * # Safety
 * `model` must come from [`ft_model_load`]; null is a no-op.
 */
void ft_model_free(struct FtModel *model);

/**
 * Task the checkpoint was trained for.
 *
 * # Safety
 * `model` must be a live handle; `out` must be valid.
 */
FtStatus ft_model_task(const struct FtModel *model, FtTask *out);

/**
 * Classifies an image file, writing the class name to `out`.
 *
 * # Safety
 * `model` must be a live multiclass handle; `image_path` NUL-terminated;
 * `out` valid.
 */
FtStatus ft_model_predict_class(const struct FtModel *model, const char *image_path, char **out);

/**
 * Tags an image file. The result is a `;`-joined list (empty string when
 * no score exceeds the threshold).
 *
 * # Safety
 * `model` must be a live multilabel handle; `image_path` NUL-terminated;
 * `out` valid.
 */
FtStatus ft_model_predict_tags(const struct FtModel *model,
                               const char *image_path,
                               double threshold,
                               char **out);

/**
 * Overall accuracy as a percentage.
 *
 * # Safety
 * `predictions` and `truths` must each hold `len` values.
 */
FtStatus ft_accuracy(const uint32_t *predictions, const uint32_t *truths, size_t len, double *out);

/**
 * Average precision (in [0, 1]) of one score/label ranking.
 *
 * # Safety
 * `scores` and `labels` must each hold `len` values; labels are 0 or 1.
 */
FtStatus ft_average_precision(const double *scores, const uint8_t *labels, size_t len, double *out);

/**
 * Macro mAP (percentage) over a row-major `n_samples x n_tags` score
 * matrix. Tags with no positive label are excluded; their count lands in
 * `excluded_out` (pass null to ignore).
 *
 * # Safety
 * `scores` must hold `n_samples * n_tags` doubles and `labels` as many
 * bytes (0 or 1).
 */
FtStatus ft_mean_average_precision(const double *scores,
                                   const uint8_t *labels,
                                   size_t n_samples,
                                   size_t n_tags,
                                   double *out,
                                   size_t *excluded_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FOLKTALENT_H */

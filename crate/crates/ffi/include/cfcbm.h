#ifndef CFCBM_H
#define CFCBM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. Zero is success.
typedef enum CfcbmStatus {
  CFCBM_STATUS_OK = 0,
  CFCBM_STATUS_NULL_POINTER = 1,
  CFCBM_STATUS_INVALID_UTF8 = 2,
  CFCBM_STATUS_BUFFER_TOO_SMALL = 3,
  CFCBM_STATUS_PANIC = 4,
  CFCBM_STATUS_IO = 10,
  CFCBM_STATUS_FORMAT = 11,
  CFCBM_STATUS_CORRUPT_DATA = 12,
  CFCBM_STATUS_JSON = 13,
  CFCBM_STATUS_DIMENSION = 20,
  CFCBM_STATUS_INDEX = 21,
  CFCBM_STATUS_DEGENERATE_INPUT = 22,
  CFCBM_STATUS_PARAMETER = 23,
  CFCBM_STATUS_ARITY = 24,
  CFCBM_STATUS_COVERAGE = 25,
  CFCBM_STATUS_VALIDATION = 26,
  CFCBM_STATUS_DOMAIN = 27,
  CFCBM_STATUS_DIVERGENCE = 28,
} CfcbmStatus;

// An embedding dataset (`.cfeb`).
typedef struct CfcbmDataset CfcbmDataset;

// A concept hierarchy read from a manifest.
typedef struct CfcbmHierarchy CfcbmHierarchy;

// A trained model together with its optimizer state and hierarchy.
typedef struct CfcbmModel CfcbmModel;

typedef struct CfcbmDatasetInfo {
  size_t n_examples;
  size_t embed_dim;
  size_t n_patches;
  size_t n_classes;
  size_t n_high;
  size_t n_low;
  bool has_example_ground_truth;
  bool has_class_ground_truth;
} CfcbmDatasetInfo;

// Evaluation metrics. Sparsities are percentages. Ground-truth metrics are
// NaN when the dataset carries no ground truth at that level.
typedef struct CfcbmMetrics {
  double accuracy_high;
  double accuracy_low;
  double sparsity_high;
  double sparsity_low;
  double jaccard_example;
  double jaccard_class;
  double matching_accuracy_example;
  double matching_accuracy_class;
} CfcbmMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *cfcbm_version(void);

// Message for the most recent failure on this thread, or null if none.
// The pointer stays valid until the next failing call on the same thread.
const char *cfcbm_last_error_message(void);

// Reads a `.cfeb` file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer. On
// success `*out` owns a dataset that must be released with
// [`cfcbm_dataset_free`].
enum CfcbmStatus cfcbm_dataset_load(const char *path, struct CfcbmDataset **out);

// # Safety
// `ds` must be null or a handle from [`cfcbm_dataset_load`] not yet freed.
void cfcbm_dataset_free(struct CfcbmDataset *ds);

// # Safety
// `ds` must be a live dataset handle and `out` a valid pointer.
enum CfcbmStatus cfcbm_dataset_info(const struct CfcbmDataset *ds, struct CfcbmDatasetInfo *out);

// Reads a concept manifest (JSON).
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer. Release
// the result with [`cfcbm_hierarchy_free`].
enum CfcbmStatus cfcbm_hierarchy_load(const char *path, struct CfcbmHierarchy **out);

// # Safety
// `hier` must be null or a handle from [`cfcbm_hierarchy_load`] not yet freed.
void cfcbm_hierarchy_free(struct CfcbmHierarchy *hier);

// Trains a model from scratch.
//
// `config_json` is a JSON object with any subset of the training options
// (`alpha_h`, `alpha_l`, `beta`, `gumbel_temperature`, `lr`,
// `amortization_lr_multiplier`, `epochs`, `batch_size`, `seed`, `infer_tau`,
// `patches`, `mode`); null means all defaults.
//
// # Safety
// `ds` and `hier` must be live handles, `config_json` null or a
// NUL-terminated string, and `out` a valid pointer. Release the result with
// [`cfcbm_model_free`].
enum CfcbmStatus cfcbm_train(const struct CfcbmDataset *ds,
                             const struct CfcbmHierarchy *hier,
                             const char *config_json,
                             struct CfcbmModel **out);

// Trains `epochs` more epochs on `ds`, continuing from the model's state.
// The stored configuration's epoch count becomes the new total.
//
// # Safety
// `model` and `ds` must be live handles.
enum CfcbmStatus cfcbm_model_continue(struct CfcbmModel *model,
                                      const struct CfcbmDataset *ds,
                                      uint64_t epochs);

// Number of epochs the model has been trained for.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum CfcbmStatus cfcbm_model_epochs(const struct CfcbmModel *model, uint64_t *out);

// Writes a checkpoint file.
//
// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum CfcbmStatus cfcbm_model_save(const struct CfcbmModel *model, const char *path);

// Reads a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer. Release
// the result with [`cfcbm_model_free`].
enum CfcbmStatus cfcbm_model_load(const char *path, struct CfcbmModel **out);

// # Safety
// `model` must be null or a model handle not yet freed.
void cfcbm_model_free(struct CfcbmModel *model);

// Evaluates the model on `ds` with indicator threshold `tau` (NaN selects
// the threshold stored in the model's configuration).
//
// # Safety
// `model` and `ds` must be live handles and `out` a valid pointer.
enum CfcbmStatus cfcbm_evaluate(const struct CfcbmModel *model,
                                const struct CfcbmDataset *ds,
                                double tau,
                                struct CfcbmMetrics *out);

// Writes per-example class predictions of the high and low heads into
// `out_high` and `out_low`, each holding `capacity` entries. Either buffer
// may be null to skip it. Fails with `BufferTooSmall` if `capacity` is less
// than the number of examples.
//
// # Safety
// `model` and `ds` must be live handles; non-null buffers must be valid for
// `capacity` writes.
enum CfcbmStatus cfcbm_predict(const struct CfcbmModel *model,
                               const struct CfcbmDataset *ds,
                               double tau,
                               size_t *out_high,
                               size_t *out_low,
                               size_t capacity);

// Jaccard similarity of two binary vectors of length `len` (1 when both
// are all zero).
//
// # Safety
// `a` and `b` must be valid for `len` reads and `out` a valid pointer.
enum CfcbmStatus cfcbm_jaccard(const uint8_t *a, const uint8_t *b, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CFCBM_H */

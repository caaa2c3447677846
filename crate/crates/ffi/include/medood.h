#ifndef MEDOOD_H
#define MEDOOD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MedoodStatus {
  MEDOOD_STATUS_OK = 0,
  MEDOOD_STATUS_NULL_POINTER = 1,
  MEDOOD_STATUS_INVALID_ARGUMENT = 2,
  MEDOOD_STATUS_IO = 3,
  MEDOOD_STATUS_FORMAT = 4,
  MEDOOD_STATUS_SHAPE = 5,
  MEDOOD_STATUS_NO_NEGATIVES = 6,
  MEDOOD_STATUS_EMPTY = 7,
  MEDOOD_STATUS_TRAINING = 8,
  MEDOOD_STATUS_PANIC = 99,
} MedoodStatus;

// Loaded dataset manifest.
typedef struct MedoodManifest MedoodManifest;

// Loaded segmentation model.
typedef struct MedoodModel MedoodModel;

typedef struct MedoodBalanceResult {
  size_t pos_count;
  size_t neg_count;
  double baseline_pnr;
  double pct_opt;
  size_t ood_selected;
  double pnr;
  double delta_pnr;
} MedoodBalanceResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null. Valid until the
// next failing call on the same thread.
const char *medood_last_error(void);

// Library version as a static NUL-terminated string.
const char *medood_version(void);

// `positives / negatives`.
//
// # Safety
// `out_pnr` must be a valid pointer to a double.
enum MedoodStatus medood_pnr_from_counts(size_t positives, size_t negatives, double *out_pnr);

// Number of OoD patches drawn for a percentage: `floor(pct * n_ood)`.
size_t medood_ood_sample_count(double pct, size_t n_ood);

// Balance objective on counts.
//
// # Safety
// `out_value` must be a valid pointer to a double.
enum MedoodStatus medood_balance_objective(double pct,
                                           size_t positives,
                                           size_t negatives,
                                           size_t n_ood,
                                           double pnr_opt,
                                           double *out_value);

// Grid search on counts. A null `grid` with `grid_len == 0` selects the
// default grid {0.0, 0.1, ..., 1.0}.
//
// # Safety
// `grid` must point to `grid_len` doubles; `out_result` must be valid.
enum MedoodStatus medood_estimate_pct_opt(size_t positives,
                                          size_t negatives,
                                          size_t n_ood,
                                          double pnr_opt,
                                          const double *grid,
                                          size_t grid_len,
                                          struct MedoodBalanceResult *out_result);

// IoU of two binary masks of `len` bytes each (non-zero = foreground).
// Both empty scores 1.0.
//
// # Safety
// `pred` and `gt` must point to `len` bytes; `out_value` must be valid.
enum MedoodStatus medood_class_iou(const uint8_t *pred,
                                   const uint8_t *gt,
                                   size_t len,
                                   double *out_value);

// Dice coefficient of two binary masks; both empty scores 1.0.
//
// # Safety
// As [`medood_class_iou`].
enum MedoodStatus medood_class_dice(const uint8_t *pred,
                                    const uint8_t *gt,
                                    size_t len,
                                    double *out_value);

// Loads a manifest directory.
//
// # Safety
// `path` must be a NUL-terminated string; `out_manifest` must be valid.
// The handle must be released with [`medood_manifest_free`].
enum MedoodStatus medood_manifest_load(const char *path, struct MedoodManifest **out_manifest);

// # Safety
// `manifest` must come from [`medood_manifest_load`] or be null.
void medood_manifest_free(struct MedoodManifest *manifest);

// Patch count, and optionally the OoD-tagged subset and class count.
//
// # Safety
// `manifest` must be a live handle; out pointers may be null.
enum MedoodStatus medood_manifest_info(const struct MedoodManifest *manifest,
                                       size_t *out_len,
                                       size_t *out_ood,
                                       size_t *out_classes);

// Positive and negative sample counts of a manifest.
//
// # Safety
// `manifest` must be a live handle; out pointers must be valid.
enum MedoodStatus medood_manifest_polarity(const struct MedoodManifest *manifest,
                                           size_t *out_positives,
                                           size_t *out_negatives);

// Grid search between an ID manifest and a mined OoD manifest.
//
// # Safety
// Handles must be live; grid and result pointers as in
// [`medood_estimate_pct_opt`].
enum MedoodStatus medood_estimate_manifests(const struct MedoodManifest *id,
                                            const struct MedoodManifest *ood,
                                            double pnr_opt,
                                            const double *grid,
                                            size_t grid_len,
                                            struct MedoodBalanceResult *out_result);

// Loads a checkpoint written by the trainer.
//
// # Safety
// `path` must be a NUL-terminated string; `out_model` must be valid.
// The handle must be released with [`medood_model_free`].
enum MedoodStatus medood_model_load(const char *path, struct MedoodModel **out_model);

// # Safety
// `model` must come from [`medood_model_load`] or be null.
void medood_model_free(struct MedoodModel *model);

// Class count and patch size the model was built for.
//
// # Safety
// `model` must be a live handle; out pointers must be valid.
enum MedoodStatus medood_model_shape(const struct MedoodModel *model,
                                     size_t *out_classes,
                                     size_t *out_patch_size);

// Class probabilities for one RGB patch (`P*P*3` bytes, row-major,
// interleaved). Writes `classes*P*P` floats, class-major.
//
// # Safety
// `image` must point to `image_len` bytes and `out_probs` to `probs_len`
// floats; the model handle must be live and not used concurrently.
enum MedoodStatus medood_model_predict(struct MedoodModel *model,
                                       const uint8_t *image,
                                       size_t image_len,
                                       float *out_probs,
                                       size_t probs_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MEDOOD_H */

#ifndef MMOE_H
#define MMOE_H

/* Generated by cbindgen from crates/capi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum MmoeStatus {
  MMOE_STATUS_OK = 0,
  MMOE_STATUS_NULL_POINTER = 1,
  MMOE_STATUS_INVALID_ARGUMENT = 2,
  MMOE_STATUS_IO = 3,
  MMOE_STATUS_NUMERICAL = 4,
  MMOE_STATUS_SHAPE = 5,
  MMOE_STATUS_CHECKPOINT = 6,
  MMOE_STATUS_FORMAT = 7,
  MMOE_STATUS_BUFFER_TOO_SMALL = 8,
  MMOE_STATUS_PANIC = 99,
} MmoeStatus;

/**
 * Opaque model handle.
 */
typedef struct MmoeModel MmoeModel;

/**
 * Metrics at one decision threshold plus the threshold-free AUC and EER.
 */
typedef struct MmoeMetrics {
  double acer;
  double apcer;
  double bpcer;
  double acc;
  double auc;
  double eer;
  double eer_threshold;
  size_t n_real;
  size_t n_fake;
} MmoeMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mmoe_version(void);

/**
 * Message for the last failed call on this thread, or NULL. Valid until the
 * next failing call on the same thread.
 */
const char *mmoe_last_error(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MmoeStatus mmoe_model_load(const char *path, struct MmoeModel **out);

/**
 * Loads a checkpoint from its JSON text.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MmoeStatus mmoe_model_load_json(const char *json, struct MmoeModel **out);

/**
 * Releases a model. NULL is ignored.
 *
 * # Safety
 * `model` must come from `mmoe_model_load*` and not be used afterwards.
 */
void mmoe_model_free(struct MmoeModel *model);

/**
 * Image side and embedding width the model expects.
 *
 * # Safety
 * All pointers must be valid.
 */
enum MmoeStatus mmoe_model_shape(const struct MmoeModel *model,
                                 size_t *image_side,
                                 size_t *embedding_dim);

/**
 * Probability that the image is a live iris.
 *
 * # Safety
 * `pixels` must hold `width * height` values; all pointers must be valid.
 */
enum MmoeStatus mmoe_model_score(const struct MmoeModel *model,
                                 const double *pixels,
                                 size_t width,
                                 size_t height,
                                 double *score);

/**
 * Unit-norm image embedding written to `out` (length `dim`).
 *
 * # Safety
 * `pixels` must hold `width * height` values and `out` at least `out_len`.
 */
enum MmoeStatus mmoe_model_embed(const struct MmoeModel *model,
                                 const double *pixels,
                                 size_t width,
                                 size_t height,
                                 double *out,
                                 size_t out_len);

/**
 * Metrics over `n` scores with labels 0 (real) or 1 (fake).
 *
 * # Safety
 * `scores` and `labels` must hold `n` values; `out` must be valid.
 */
enum MmoeStatus mmoe_metrics(const double *scores,
                             const uint8_t *labels,
                             size_t n,
                             double threshold,
                             struct MmoeMetrics *out);

/**
 * Cosine agreement loss of `experts × slots × dim` expert outputs, expert 0
 * as the reference.
 *
 * # Safety
 * `outputs` must hold `experts * slots * dim` values; `loss` must be valid.
 */
enum MmoeStatus mmoe_cosine_agreement(const double *outputs,
                                      size_t experts,
                                      size_t slots,
                                      size_t dim,
                                      double *loss);

/**
 * Renders one synthetic iris. `device` is one of H100, DALSA, LG2200,
 * AI1000, LG4000, AD100; `group` is 0 or 1. Writes `size * size` pixels.
 *
 * # Safety
 * `device` must be a NUL-terminated string and `out` hold `out_len` values.
 */
enum MmoeStatus mmoe_render_iris(uint64_t identity,
                                 uint8_t label,
                                 uint8_t group,
                                 const char *device,
                                 size_t size,
                                 double *out,
                                 size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MMOE_H */

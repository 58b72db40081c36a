#ifndef ALT_FFI_H
#define ALT_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Division modes for [`alt_partition`].
 */
#define ALT_DIVISION_LITERAL 0

#define ALT_DIVISION_PROSE 1

#define ALT_DIVISION_OFF 2

/**
 * Aggregates for [`alt_state_new`].
 */
#define ALT_TAU_MAX 0

#define ALT_TAU_MEAN 1

/**
 * Status codes returned by every fallible function.
 */
typedef enum AltStatus {
  ALT_STATUS_OK = 0,
  ALT_STATUS_NULL_POINTER = 1,
  ALT_STATUS_INVALID_ARGUMENT = 2,
  ALT_STATUS_DIMENSION_MISMATCH = 3,
  ALT_STATUS_INDEX_OUT_OF_RANGE = 4,
  ALT_STATUS_NON_FINITE = 5,
  ALT_STATUS_IO = 6,
  ALT_STATUS_FORMAT = 7,
  ALT_STATUS_VERSION = 8,
  ALT_STATUS_BUFFER_TOO_SMALL = 9,
  ALT_STATUS_PANIC = 99,
} AltStatus;

/**
 * Opaque feature bank handle.
 */
typedef struct AltBank AltBank;

/**
 * Opaque learning-state handle.
 */
typedef struct AltLearningState AltLearningState;

/**
 * Opaque model handle.
 */
typedef struct AltModel AltModel;

/**
 * Layer widths of a model. `bottleneck_dim` is 0 when there is none.
 */
typedef struct AltModelDims {
  size_t input_dim;
  size_t hidden_dim;
  size_t feature_dim;
  size_t bottleneck_dim;
  size_t num_classes;
  /**
   * Width of the bank feature `z`.
   */
  size_t embedding_dim;
} AltModelDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next `alt_*` call on this thread.
 */
const char *alt_last_error(void);

/**
 * Loads a model checkpoint.
 */
enum AltStatus alt_model_load(const char *path, struct AltModel **out);

/**
 * Freshly initialized model with seeded random weights.
 */
enum AltStatus alt_model_new(const struct AltModelDims *dims, uint64_t seed, struct AltModel **out);

void alt_model_free(struct AltModel *model);

enum AltStatus alt_model_dims(const struct AltModel *model, struct AltModelDims *out);

/**
 * Forward pass on one input. `z_out` receives the raw feature
 * (`embedding_dim` values), `p_out` the class probabilities. Either output
 * may be null with length 0 to skip it.
 */
enum AltStatus alt_model_forward(const struct AltModel *model,
                                 const double *x,
                                 size_t x_len,
                                 double *z_out,
                                 size_t z_len,
                                 double *p_out,
                                 size_t p_len);

/**
 * Builds a bank from a row-major `rows x cols` input matrix.
 */
enum AltStatus alt_bank_build(const struct AltModel *model,
                              const double *inputs,
                              size_t rows,
                              size_t cols,
                              struct AltBank **out);

enum AltStatus alt_bank_load(const char *path, struct AltBank **out);

enum AltStatus alt_bank_save(const struct AltBank *bank, const char *path);

void alt_bank_free(struct AltBank *bank);

/**
 * Number of rows, or 0 for a null handle.
 */
size_t alt_bank_len(const struct AltBank *bank);

/**
 * Copies row `index` of the bank: `feature_out` gets the unit feature,
 * `prob_out` the stored prediction.
 */
enum AltStatus alt_bank_row(const struct AltBank *bank,
                            size_t index,
                            double *feature_out,
                            size_t feature_len,
                            double *prob_out,
                            size_t prob_len);

/**
 * The `k` nearest rows to row `query` by cosine similarity, excluding
 * `query`, sorted by descending similarity with ties to the smaller index.
 */
enum AltStatus alt_bank_knn(const struct AltBank *bank,
                            size_t query,
                            size_t k,
                            size_t *indices_out,
                            double *similarities_out,
                            size_t out_len);

/**
 * Per-class division thresholds from learning-effect counts. Unreachable
 * thresholds are written as `+inf`.
 */
enum AltStatus alt_division_thresholds(const uint64_t *sigma,
                                       size_t num_classes,
                                       double *out,
                                       size_t out_len);

/**
 * Marks each row of a row-major `rows x num_classes` probability matrix as
 * outlier (1) or inner (0).
 */
enum AltStatus alt_partition(const double *probs,
                             size_t rows,
                             size_t num_classes,
                             const double *thresholds,
                             uint32_t mode,
                             uint8_t *outlier_mask_out,
                             size_t mask_len);

/**
 * `(1 + 10 iter / max_iter)^(-beta)`.
 */
enum AltStatus alt_lambda_schedule(size_t iter, size_t max_iter, double beta, double *out);

enum AltStatus alt_state_new(size_t num_classes,
                             double alpha,
                             uint32_t aggregate,
                             struct AltLearningState **out);

void alt_state_free(struct AltLearningState *state);

/**
 * Advances the confidence EMA with a batch of per-sample top confidences.
 */
enum AltStatus alt_state_update_tau(struct AltLearningState *state,
                                    const double *confidences,
                                    size_t len,
                                    double *tau_out);

/**
 * Recomputes learning effects and thresholds from the bank's predictions
 * and copies the thresholds out.
 */
enum AltStatus alt_state_refresh(struct AltLearningState *state,
                                 const struct AltBank *bank,
                                 double *thresholds_out,
                                 size_t out_len);

/**
 * Current EMA threshold, or NaN for a null handle.
 */
double alt_state_tau(const struct AltLearningState *state);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ALT_FFI_H */

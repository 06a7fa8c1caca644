#ifndef ASGMAMBA_H
#define ASGMAMBA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum AsgmStatus {
  ASGM_STATUS_OK = 0,
  ASGM_STATUS_NULL_POINTER = 1,
  ASGM_STATUS_INVALID_ARGUMENT = 2,
  ASGM_STATUS_SHAPE = 3,
  ASGM_STATUS_IO = 4,
  ASGM_STATUS_DATA = 5,
  ASGM_STATUS_NUMERICAL = 6,
  ASGM_STATUS_PANIC = 7,
} AsgmStatus;

/**
 * Opaque model handle.
 */
typedef struct AsgmModel AsgmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint file. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AsgmStatus asgm_model_load(const char *path, struct AsgmModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from `asgm_model_load` and not be used afterwards.
 */
void asgm_model_free(struct AsgmModel *model);

/**
 * Look-back, horizon and variate count of a model. Any out pointer may
 * be null.
 *
 * # Safety
 * `model` must be a live handle; non-null out pointers must be valid.
 */
enum AsgmStatus asgm_model_dims(const struct AsgmModel *model,
                                size_t *lookback,
                                size_t *horizon,
                                size_t *variates);

/**
 * Scalar parameter count of a model.
 *
 * # Safety
 * `model` must be a live handle and `out` valid.
 */
enum AsgmStatus asgm_model_param_count(const struct AsgmModel *model, size_t *out);

/**
 * Forecasts `batch` windows. `input` holds `batch × lookback × variates`
 * values and `output` receives `batch × horizon × variates`, both
 * row-major on the scale of the training data; the stored standardization
 * is applied and undone around the model.
 *
 * # Safety
 * `input` and `output` must point to at least `input_len` and
 * `output_len` doubles.
 */
enum AsgmStatus asgm_model_forecast(const struct AsgmModel *model,
                                    const double *input,
                                    size_t input_len,
                                    size_t batch,
                                    double *output,
                                    size_t output_len);

/**
 * Band-energy shares of one patch (length a power of two) into `out`,
 * which must hold `k_freq` doubles.
 *
 * # Safety
 * `patch` must point to `len` doubles and `out` to `k_freq` doubles.
 */
enum AsgmStatus asgm_spectral_descriptor(const double *patch,
                                         size_t len,
                                         size_t k_freq,
                                         double *out);

/**
 * Message of the last failed call on this thread, or null. Valid until
 * the next call into the library from the same thread.
 */
const char *asgm_last_error(void);

/**
 * NUL-terminated library version.
 */
const char *asgm_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ASGMAMBA_H */

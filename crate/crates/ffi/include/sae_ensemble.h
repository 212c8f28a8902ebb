#ifndef SAE_ENSEMBLE_H
#define SAE_ENSEMBLE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum SaeStatus {
  SAE_STATUS_OK = 0,
  SAE_STATUS_NULL_POINTER = 1,
  SAE_STATUS_INVALID_ARGUMENT = 2,
  SAE_STATUS_DIMENSION_MISMATCH = 3,
  SAE_STATUS_IO = 4,
  SAE_STATUS_CORRUPT = 5,
  SAE_STATUS_NUMERICAL = 6,
  SAE_STATUS_PANIC = 7,
} SaeStatus;

/**
 * A loaded single SAE or ensemble.
 */
typedef struct SaeTarget SaeTarget;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sae_version(void);

/**
 * Message for the last failed call on this thread; empty after a success.
 * Valid until the next call into this library from the same thread.
 */
const char *sae_last_error(void);

/**
 * Loads an SAE checkpoint file or an ensemble directory.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SaeStatus sae_target_load(const char *path, struct SaeTarget **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `target` must come from [`sae_target_load`] and not be used afterwards.
 */
void sae_target_free(struct SaeTarget *target);

/**
 * Writes input dimension `d`, feature count `m` and member count `J`.
 * Any output pointer may be null.
 *
 * # Safety
 * `target` must be a live handle; non-null outputs must be valid.
 */
enum SaeStatus sae_target_shape(const struct SaeTarget *target,
                                size_t *d,
                                size_t *m,
                                size_t *members);

/**
 * Feature coefficients for `rows` row-major inputs of width `cols`.
 * `output` receives `rows * m` values, row-major.
 *
 * # Safety
 * `input` must hold `rows * cols` values and `output` `out_len` values.
 */
enum SaeStatus sae_target_encode(const struct SaeTarget *target,
                                 const double *input,
                                 size_t rows,
                                 size_t cols,
                                 double *output,
                                 size_t out_len);

/**
 * Reconstructions for `rows` row-major inputs; `output` receives
 * `rows * d` values.
 *
 * # Safety
 * `input` must hold `rows * cols` values and `output` `out_len` values.
 */
enum SaeStatus sae_target_reconstruct(const struct SaeTarget *target,
                                      const double *input,
                                      size_t rows,
                                      size_t cols,
                                      double *output,
                                      size_t out_len);

/**
 * Evaluates the target on a shard manifest and returns the metrics report
 * as a JSON string in `out_json`, released with [`sae_string_free`].
 * `taus` may be null when `n_taus` is 0 (the default threshold is used).
 *
 * # Safety
 * `manifest` must be a NUL-terminated string, `taus` must hold `n_taus`
 * values and `out_json` must be valid.
 */
enum SaeStatus sae_target_evaluate_json(const struct SaeTarget *target,
                                        const char *manifest,
                                        const double *taus,
                                        size_t n_taus,
                                        char **out_json);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void sae_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAE_ENSEMBLE_H */

#ifndef ROBUST_OPE_H
#define ROBUST_OPE_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum RoStatus {
  RO_STATUS_OK = 0,
  RO_STATUS_NULL_POINTER = 1,
  RO_STATUS_INVALID_ARGUMENT = 2,
  RO_STATUS_DOMAIN = 3,
  RO_STATUS_INSUFFICIENT_DATA = 4,
  RO_STATUS_SINGULAR = 5,
  RO_STATUS_NUMERICAL = 6,
  RO_STATUS_COVERAGE = 7,
  RO_STATUS_FOLD = 8,
  RO_STATUS_FORMAT = 9,
  RO_STATUS_HASH_MISMATCH = 10,
  RO_STATUS_IO = 11,
  RO_STATUS_JSON = 12,
  RO_STATUS_UTF8 = 13,
  RO_STATUS_INDEX_OUT_OF_RANGE = 14,
  RO_STATUS_PANIC = 15,
} RoStatus;

typedef enum RoEstimator {
  RO_ESTIMATOR_Q = 0,
  RO_ESTIMATOR_W = 1,
  RO_ESTIMATOR_ORTH = 2,
} RoEstimator;

typedef enum RoSign {
  RO_SIGN_MINUS = 0,
  RO_SIGN_PLUS = 1,
} RoSign;

/**
 * Experiment configuration.
 */
typedef struct RoConfig RoConfig;

/**
 * Logged transition tuples.
 */
typedef struct RoDataset RoDataset;

/**
 * Q, W and Orth estimates for every configured sign and lambda.
 */
typedef struct RoEstimates RoEstimates;

/**
 * One estimate. Interval fields are NaN when the estimator has none.
 */
typedef struct RoEstimate {
  enum RoEstimator estimator;
  enum RoSign sign;
  double lambda;
  size_t n;
  double value;
  double std_error;
  double ci_lower_1sided_95;
  double ci_upper_1sided_95;
} RoEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next `ro_*` call on the same thread.
 */
const char *ro_last_error(void);

/**
 * The benchmark configuration with default settings.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage.
 */
enum RoStatus ro_config_default(struct RoConfig **out);

/**
 * Parse and validate a JSON configuration document.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum RoStatus ro_config_from_json(const char *json, struct RoConfig **out);

/**
 * Serialize a configuration. Release the string with [`ro_string_free`].
 *
 * # Safety
 * `cfg` must come from this library; `out` must be writable.
 */
enum RoStatus ro_config_to_json(const struct RoConfig *cfg, char **out);

/**
 * Set the base seed; replication `i` uses `seed + i`.
 *
 * # Safety
 * `cfg` must come from this library.
 */
enum RoStatus ro_config_set_seed(struct RoConfig *cfg, uint64_t seed);

/**
 * # Safety
 * `cfg` must be null or come from this library and not be used afterwards.
 */
void ro_config_free(struct RoConfig *cfg);

/**
 * # Safety
 * `s` must be null or come from this library and not be used afterwards.
 */
void ro_string_free(char *s);

/**
 * Roll out the logging policy for replication `replication`.
 *
 * # Safety
 * `cfg` must come from this library; `out` must be writable.
 */
enum RoStatus ro_dataset_generate(const struct RoConfig *cfg,
                                  size_t replication,
                                  struct RoDataset **out);

/**
 * Load a dataset CSV, checking its sidecar against `cfg` when present.
 *
 * # Safety
 * `cfg` must come from this library; `path` must be NUL-terminated; `out`
 * must be writable.
 */
enum RoStatus ro_dataset_load(const struct RoConfig *cfg, const char *path, struct RoDataset **out);

/**
 * # Safety
 * `data` must come from this library; `out` must be writable.
 */
enum RoStatus ro_dataset_len(const struct RoDataset *data, size_t *out);

/**
 * # Safety
 * `data` must be null or come from this library and not be used afterwards.
 */
void ro_dataset_free(struct RoDataset *data);

/**
 * Fit nuisances and compute Q, W and Orth estimates for every configured
 * sign and lambda.
 *
 * # Safety
 * `cfg` and `data` must come from this library; `out` must be writable.
 */
enum RoStatus ro_estimate(const struct RoConfig *cfg,
                          const struct RoDataset *data,
                          struct RoEstimates **out);

/**
 * # Safety
 * `est` must come from this library; `out` must be writable.
 */
enum RoStatus ro_estimates_len(const struct RoEstimates *est, size_t *out);

/**
 * # Safety
 * `est` must come from this library; `out` must be writable.
 */
enum RoStatus ro_estimates_get(const struct RoEstimates *est, size_t index, struct RoEstimate *out);

/**
 * # Safety
 * `est` must be null or come from this library and not be used afterwards.
 */
void ro_estimates_free(struct RoEstimates *est);

/**
 * `Λ⁻¹E[v] + (1-Λ⁻¹)CVaR_τ[v]` of a discrete law with `len` atoms.
 *
 * # Safety
 * `values` and `probs` must point to `len` readable doubles; `out` must be
 * writable.
 */
enum RoStatus ro_robust_expectation(const double *values,
                                    const double *probs,
                                    size_t len,
                                    double lambda,
                                    enum RoSign sign,
                                    double *out);

/**
 * Monte Carlo robust value of the configured target policy.
 *
 * # Safety
 * `cfg` must come from this library; `value` and `std_error` must be
 * writable.
 */
enum RoStatus ro_ground_truth(const struct RoConfig *cfg,
                              double lambda,
                              enum RoSign sign,
                              double *value,
                              double *std_error);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ROBUST_OPE_H */

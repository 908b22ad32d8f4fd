#ifndef IVLATE_H
#define IVLATE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum IvlateStatus {
  IVLATE_STATUS_OK = 0,
  IVLATE_STATUS_NULL_POINTER = 1,
  IVLATE_STATUS_INVALID_ARGUMENT = 2,
  IVLATE_STATUS_IO = 3,
  IVLATE_STATUS_DATA = 4,
  IVLATE_STATUS_DOMAIN = 5,
  IVLATE_STATUS_UNSUPPORTED = 6,
  IVLATE_STATUS_NUMERICAL = 7,
  IVLATE_STATUS_PANIC = 8,
} IvlateStatus;

typedef enum IvlateScale {
  IVLATE_SCALE_ADDITIVE = 0,
  IVLATE_SCALE_MULTIPLICATIVE = 1,
} IvlateScale;

/**
 * Opaque dataset handle.
 */
typedef struct IvlateDataset IvlateDataset;

/**
 * Opaque fit result handle.
 */
typedef struct IvlateFit IvlateFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *ivlate_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ivlate_version(void);

/**
 * Loads a CSV file with binary columns `y`, `d`, `z` and numeric covariates.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum IvlateStatus ivlate_dataset_load_csv(const char *path, struct IvlateDataset **out);

/**
 * Draws a dataset from the simulation design.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum IvlateStatus ivlate_dataset_simulate(enum IvlateScale scale,
                                          size_t n,
                                          uint64_t seed,
                                          bool one_sided,
                                          struct IvlateDataset **out);

/**
 * Number of rows, or 0 for a null handle.
 *
 * # Safety
 * `data` must be null or a live handle.
 */
size_t ivlate_dataset_n(const struct IvlateDataset *data);

/**
 * # Safety
 * `data` must be null or a handle not yet freed.
 */
void ivlate_dataset_free(struct IvlateDataset *data);

/**
 * Fits one estimator. `scenario` names a simulation scenario (`bth`, `psc`,
 * `opc`, `bad`) for simulated data; when null every model uses all
 * covariates.
 *
 * # Safety
 * `data` must be a live handle, `estimator` a NUL-terminated string,
 * `scenario` null or a NUL-terminated string, and `out` a valid pointer.
 */
enum IvlateStatus ivlate_fit(const struct IvlateDataset *data,
                             const char *estimator,
                             enum IvlateScale scale,
                             const char *scenario,
                             bool one_sided,
                             struct IvlateFit **out);

/**
 * Number of effect-model coefficients, or 0 for a null handle.
 *
 * # Safety
 * `fit` must be null or a live handle.
 */
size_t ivlate_fit_n_coef(const struct IvlateFit *fit);

/**
 * Copies the coefficients into `buf`, which must hold at least
 * `ivlate_fit_n_coef(fit)` values.
 *
 * # Safety
 * `fit` must be a live handle and `buf` valid for `len` writes.
 */
enum IvlateStatus ivlate_fit_alpha(const struct IvlateFit *fit, double *buf, size_t len);

/**
 * Whether every stage of the fit converged; false for a null handle.
 *
 * # Safety
 * `fit` must be null or a live handle.
 */
bool ivlate_fit_converged(const struct IvlateFit *fit);

/**
 * The full result as JSON, or null on failure. Release with
 * [`ivlate_string_free`].
 *
 * # Safety
 * `fit` must be null or a live handle.
 */
char *ivlate_fit_to_json(const struct IvlateFit *fit);

/**
 * # Safety
 * `s` must be null or a string returned by this library and not yet freed.
 */
void ivlate_string_free(char *s);

/**
 * # Safety
 * `fit` must be null or a handle not yet freed.
 */
void ivlate_fit_free(struct IvlateFit *fit);

/**
 * Complier risks `(f0, f1)` for effect `theta` and odds product `op`.
 *
 * # Safety
 * `f0` and `f1` must be valid pointers.
 */
enum IvlateStatus ivlate_complier_risks(double theta,
                                        double op,
                                        enum IvlateScale scale,
                                        double *f0,
                                        double *f1);

/**
 * Cell probabilities `p(d, y | z)` at index `4 d + 2 y + z` from the
 * structural point `(theta, phi1, phi2, phi3, phi4, op)`.
 *
 * # Safety
 * `point` must be valid for 6 reads and `cells` for 8 writes.
 */
enum IvlateStatus ivlate_inverse_map(const double *point, enum IvlateScale scale, double *cells);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IVLATE_H */

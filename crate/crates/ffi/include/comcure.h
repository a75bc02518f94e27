#ifndef COMCURE_H
#define COMCURE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ComcureStatus {
  COMCURE_STATUS_OK = 0,
  COMCURE_STATUS_NULL_ARGUMENT = 1,
  // Malformed input: dataset, manifest, covariates or ν-grid.
  COMCURE_STATUS_INVALID = 2,
  // Parameters left the model's numerical domain.
  COMCURE_STATUS_NUMERIC = 3,
  // EM stopped at its iteration cap; the fit handle is still returned.
  COMCURE_STATUS_NOT_CONVERGED = 4,
  COMCURE_STATUS_IO = 5,
  // A caller buffer is shorter than the value count.
  COMCURE_STATUS_BUFFER_TOO_SMALL = 6,
  // Standard errors were not computed or the information matrix was singular.
  COMCURE_STATUS_UNAVAILABLE = 7,
  COMCURE_STATUS_PANIC = 8,
} ComcureStatus;

typedef struct ComcureDataset ComcureDataset;

typedef struct ComcureFit ComcureFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty if none. The
// pointer stays valid until the next failing call on the same thread.
const char *comcure_last_error(void);

// Parses dataset text (the CLI's delimited format).
//
// # Safety
// `csv` must be a NUL-terminated string and `out` a valid pointer.
enum ComcureStatus comcure_dataset_from_csv(const char *csv, struct ComcureDataset **out);

// Reads and parses a dataset file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum ComcureStatus comcure_dataset_load(const char *path, struct ComcureDataset **out);

// Number of subjects, or 0 for NULL.
//
// # Safety
// `data` must be NULL or a live dataset handle.
size_t comcure_dataset_len(const struct ComcureDataset *data);

// # Safety
// `data` must be NULL or a handle not yet freed.
void comcure_dataset_free(struct ComcureDataset *data);

// Fits `model.family` from a TOML manifest. On `NotConverged` the handle is
// still written to `out`.
//
// # Safety
// `data` must be a live dataset handle, `manifest_toml` a NUL-terminated
// string and `out` a valid pointer.
enum ComcureStatus comcure_fit(const struct ComcureDataset *data,
                               const char *manifest_toml,
                               struct ComcureFit **out);

// Profiles over `nu_grid` (`"0, 0.5, 1:2:0.25, inf"` style), or over the
// manifest's `model.nu_grid` when `nu_grid` is NULL.
//
// # Safety
// As [`comcure_fit`]; `nu_grid` may be NULL.
enum ComcureStatus comcure_profile(const struct ComcureDataset *data,
                                   const char *manifest_toml,
                                   const char *nu_grid,
                                   struct ComcureFit **out);

// # Safety
// `fit` must be a live fit handle and `out` a valid pointer.
enum ComcureStatus comcure_fit_loglik(const struct ComcureFit *fit, double *out);

// # Safety
// `fit` must be a live fit handle; `aic` and `bic` valid pointers.
enum ComcureStatus comcure_fit_aic_bic(const struct ComcureFit *fit, double *aic, double *bic);

// Selected ν; `+inf` for the Bernoulli limit.
//
// # Safety
// `fit` must be a live fit handle and `out` a valid pointer.
enum ComcureStatus comcure_fit_nu(const struct ComcureFit *fit, double *out);

// 1 if EM met its tolerance, 0 otherwise.
//
// # Safety
// `fit` must be a live fit handle and `out` a valid pointer.
enum ComcureStatus comcure_fit_converged(const struct ComcureFit *fit, int32_t *out);

// Number of estimated parameters `(β…, γ1, γ2)`, or 0 for NULL.
//
// # Safety
// `fit` must be NULL or a live fit handle.
size_t comcure_fit_param_count(const struct ComcureFit *fit);

// Copies the estimates `(β…, γ1, γ2)` into `buf`.
//
// # Safety
// `fit` must be a live fit handle and `buf` valid for `len` writes.
enum ComcureStatus comcure_fit_params(const struct ComcureFit *fit, double *buf, size_t len);

// Copies the standard errors in parameter order into `buf`.
//
// # Safety
// `fit` must be a live fit handle and `buf` valid for `len` writes.
enum ComcureStatus comcure_fit_std_errors(const struct ComcureFit *fit, double *buf, size_t len);

// The fit report as JSON, in the CLI's `fit.json` format. Release the
// string with [`comcure_string_free`].
//
// # Safety
// `fit` must be a live fit handle and `out` a valid pointer.
enum ComcureStatus comcure_fit_to_json(const struct ComcureFit *fit, char **out);

// # Safety
// `s` must be NULL or a string returned by this library and not yet freed.
void comcure_string_free(char *s);

// Population survival at `y` and cure probability for a covariate profile
// (`"name=value,…"`) with `exposure_count` daily exposures.
//
// # Safety
// `fit` must be a live fit handle, `covariates` a NUL-terminated string,
// `s_pop` and `cure` valid pointers.
enum ComcureStatus comcure_predict(const struct ComcureFit *fit,
                                   const char *covariates,
                                   size_t exposure_count,
                                   double y,
                                   double *s_pop,
                                   double *cure);

// # Safety
// `fit` must be NULL or a handle not yet freed.
void comcure_fit_free(struct ComcureFit *fit);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COMCURE_H */

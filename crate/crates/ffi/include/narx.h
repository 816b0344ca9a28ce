#ifndef NARX_H
#define NARX_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes. 2..=4 match the `narx` command-line exit codes.
typedef enum NarxStatus {
  NARX_STATUS_OK = 0,
  NARX_STATUS_NULL_POINTER = 1,
  NARX_STATUS_INVALID_INPUT = 2,
  NARX_STATUS_NUMERICAL = 3,
  NARX_STATUS_VALIDATION = 4,
  NARX_STATUS_PANIC = 5,
} NarxStatus;

typedef enum NarxMethod {
  NARX_METHOD_ERR = 0,
  NARX_METHOD_SRR = 1,
  NARX_METHOD_SSMR = 2,
} NarxMethod;

// Opaque model handle.
typedef struct NarxModel NarxModel;

// Summary of a validation run.
typedef struct NarxValidation {
  double rmse;
  double mse;
  double ms1pe;
  double msse;
  // Infinite when the free run diverges.
  double j_corr;
  // Number of residual tests that passed, out of `tests_total`.
  uint32_t tests_passed;
  uint32_t tests_total;
} NarxValidation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *narx_version(void);

// Message of the last failed call on this thread, or NULL. The pointer is
// valid until the next library call on the same thread.
const char *narx_last_error_message(void);

// Releases a string returned by the library. NULL is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void narx_string_free(char *s);

// Releases a model. NULL is ignored.
//
// # Safety
// `model` must come from this library and not be freed twice.
void narx_model_free(struct NarxModel *model);

// Parses a model from its JSON form.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum NarxStatus narx_model_from_json(const char *json, struct NarxModel **out);

// Serializes a model; free the result with `narx_string_free`.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum NarxStatus narx_model_to_json(const struct NarxModel *model, char **out);

// Number of terms, or 0 for NULL.
//
// # Safety
// `model` must be NULL or a live handle.
uintptr_t narx_model_n_terms(const struct NarxModel *model);

// Copies up to `cap` parameters into `theta`; returns the parameter count.
//
// # Safety
// `theta` must hold `cap` doubles (may be NULL when `cap` is 0).
uintptr_t narx_model_parameters(const struct NarxModel *model, double *theta, uintptr_t cap);

// Free-run simulation. `y_out` receives `n` samples; on divergence the
// status is `Numerical` and samples from the divergence point on are NaN.
//
// # Safety
// `u` and `y_out` must hold `n` doubles, `init` must hold `n_init`.
enum NarxStatus narx_model_simulate(const struct NarxModel *model,
                                    const double *u,
                                    uintptr_t n,
                                    const double *init,
                                    uintptr_t n_init,
                                    double *y_out);

// Least-squares fit of a structure (JSON) to data. With `constraints_json`
// non-NULL the fit is constrained least squares.
//
// # Safety
// Strings must be NUL-terminated; `u` and `y` must hold `n` doubles.
enum NarxStatus narx_fit(const char *structure_json,
                         const double *u,
                         const double *y,
                         uintptr_t n,
                         const char *constraints_json,
                         struct NarxModel **out);

// Forward structure selection with AIC stopping, followed by a
// least-squares fit of the selected terms.
//
// # Safety
// `meta` must be NUL-terminated (e.g. "ny=2,nu=2,l=2,d=1"); `u` and `y`
// must hold `n` doubles.
enum NarxStatus narx_select(enum NarxMethod method,
                            const char *meta,
                            uintptr_t n_max,
                            bool constant,
                            const double *u,
                            const double *y,
                            uintptr_t n,
                            struct NarxModel **out);

// Free-run metrics and residual tests of `model` on data.
//
// # Safety
// `u` and `y` must hold `n` doubles; `out` must be writable.
enum NarxStatus narx_validate(const struct NarxModel *model,
                              const double *u,
                              const double *y,
                              uintptr_t n,
                              uintptr_t tau_max,
                              struct NarxValidation *out);

// Runs the pipeline from a JSON configuration. On success `manifest_out`
// (if non-NULL) receives the manifest JSON.
//
// # Safety
// `config_json` must be NUL-terminated; `manifest_out` NULL or writable.
enum NarxStatus narx_pipeline_run(const char *config_json, char **manifest_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NARX_H */

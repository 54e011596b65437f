#ifndef CPE_H
#define CPE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result code of every C entry point.
typedef enum CpeStatus {
  CPE_STATUS_OK = 0,
  // A required pointer argument was null.
  CPE_STATUS_NULL_POINTER = 1,
  // A size, index or string argument was out of range or malformed.
  CPE_STATUS_INVALID_ARGUMENT = 2,
  // The configuration could not be parsed or is inconsistent.
  CPE_STATUS_CONFIG = 3,
  // Reading or writing files failed.
  CPE_STATUS_IO = 4,
  // A numerical step failed (divergence, non-finite values, singular systems).
  CPE_STATUS_NUMERICAL = 5,
  // The experiment finished but some runs failed; see the manifest.
  CPE_STATUS_RUN_FAILURES = 6,
  // An unexpected internal error was caught at the boundary.
  CPE_STATUS_PANIC = 7,
} CpeStatus;

// A consensus-based optimization run that is advanced step by step.
typedef struct CpeCbo CpeCbo;

// An ensemble Kalman inversion run that is advanced step by step.
typedef struct CpeEki CpeEki;

// A parsed and validated experiment configuration.
typedef struct CpeExperiment CpeExperiment;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null after a success.
//
// The string stays valid until the next call into this library on the same thread.
const char *cpe_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *cpe_version(void);

// Parses an experiment configuration from TOML text.
//
// # Safety
// `toml` must be a NUL-terminated string and `out` a valid pointer.
enum CpeStatus cpe_experiment_from_toml(const char *toml, struct CpeExperiment **out);

// Reads an experiment configuration from a TOML file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum CpeStatus cpe_experiment_from_file(const char *path, struct CpeExperiment **out);

// Replaces the output directory of an experiment.
//
// # Safety
// `experiment` must be a live handle and `path` a NUL-terminated string.
enum CpeStatus cpe_experiment_set_output(struct CpeExperiment *experiment, const char *path);

// Runs every sweep point and writes the trace, summary and manifest files.
//
// `workers = 0` uses all logical cores. `failed_runs` (optional) receives
// the number of failed runs; the status is `RunFailures` when it is nonzero.
//
// # Safety
// `experiment` must be a live handle; `failed_runs` may be null.
enum CpeStatus cpe_experiment_run(const struct CpeExperiment *experiment,
                                  size_t workers,
                                  size_t *failed_runs);

// Releases an experiment handle. Null is ignored.
//
// # Safety
// `experiment` must be null or a handle not yet freed.
void cpe_experiment_free(struct CpeExperiment *experiment);

// Starts run `run` of a CBO experiment, drawing the initial ensemble from
// seed `base_seed + run`. Sweep axes are ignored; the base values are used.
//
// # Safety
// `experiment` must be a live handle and `out` a valid pointer.
enum CpeStatus cpe_cbo_new(const struct CpeExperiment *experiment,
                           uint32_t run,
                           struct CpeCbo **out);

// Advances a CBO run by `steps` time steps.
//
// # Safety
// `cbo` must be a live handle.
enum CpeStatus cpe_cbo_step(struct CpeCbo *cbo, uint64_t steps);

// Dimension, ensemble size, generation and time of a CBO run; any output may be null.
//
// # Safety
// `cbo` must be a live handle; non-null outputs must be valid pointers.
enum CpeStatus cpe_cbo_state(const struct CpeCbo *cbo,
                             size_t *dim,
                             size_t *particles,
                             uint64_t *generation,
                             double *time);

// Writes the Gibbs-weighted mean (`dim` values) into `out`.
//
// # Safety
// `cbo` must be a live handle and `out` must hold `len` doubles.
enum CpeStatus cpe_cbo_weighted_mean(const struct CpeCbo *cbo, double *out, size_t len);

// Writes all particle positions, particle-major (`particles * dim` values).
//
// # Safety
// `cbo` must be a live handle and `out` must hold `len` doubles.
enum CpeStatus cpe_cbo_positions(const struct CpeCbo *cbo, double *out, size_t len);

// Releases a CBO handle. Null is ignored.
//
// # Safety
// `cbo` must be null or a handle not yet freed.
void cpe_cbo_free(struct CpeCbo *cbo);

// Starts run `run` of an EKI experiment from seed `base_seed + run`.
// Sweep axes are ignored; the base values are used.
//
// # Safety
// `experiment` must be a live handle and `out` a valid pointer.
enum CpeStatus cpe_eki_new(const struct CpeExperiment *experiment,
                           uint32_t run,
                           struct CpeEki **out);

// Performs one adaptive EKI iteration.
//
// `dt` and `stagnated` (both optional) receive the step size taken and
// whether the interaction matrix vanished, leaving the ensemble unchanged.
//
// # Safety
// `eki` must be a live handle; non-null outputs must be valid pointers.
enum CpeStatus cpe_eki_step(struct CpeEki *eki, double *dt, bool *stagnated);

// Dimension, ensemble size, iteration and pseudo-time of an EKI run; any output may be null.
//
// # Safety
// `eki` must be a live handle; non-null outputs must be valid pointers.
enum CpeStatus cpe_eki_state(const struct CpeEki *eki,
                             size_t *dim,
                             size_t *particles,
                             uint64_t *generation,
                             double *time);

// Writes the ensemble mean (`dim` values) into `out`.
//
// # Safety
// `eki` must be a live handle and `out` must hold `len` doubles.
enum CpeStatus cpe_eki_mean(const struct CpeEki *eki, double *out, size_t len);

// Writes all particle positions, particle-major (`particles * dim` values).
//
// # Safety
// `eki` must be a live handle and `out` must hold `len` doubles.
enum CpeStatus cpe_eki_positions(const struct CpeEki *eki, double *out, size_t len);

// Spectral norm of the sample covariance of the current ensemble.
//
// # Safety
// `eki` must be a live handle and `out` a valid pointer.
enum CpeStatus cpe_eki_covariance_norm(const struct CpeEki *eki, double *out);

// Releases an EKI handle. Null is ignored.
//
// # Safety
// `eki` must be null or a handle not yet freed.
void cpe_eki_free(struct CpeEki *eki);

// Shifted Ackley function `f(x - shift)` in `dim` dimensions.
//
// # Safety
// `shift` and `x` must hold `dim` doubles; `out` must be a valid pointer.
enum CpeStatus cpe_ackley(const double *shift, const double *x, size_t dim, double *out);

// 2-Wasserstein distance between two equal-size empirical measures with
// uniform weights. Both point sets are particle-major (`count * dim` values).
//
// # Safety
// `a` and `b` must hold `count * dim` doubles; `out` must be a valid pointer.
enum CpeStatus cpe_w2_empirical(const double *a,
                                const double *b,
                                size_t count,
                                size_t dim,
                                double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CPE_H */

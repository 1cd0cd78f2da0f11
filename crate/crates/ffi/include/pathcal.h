#ifndef PATHCAL_H
#define PATHCAL_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  PATHCAL_STATUS_OK = 0,
  PATHCAL_STATUS_NULL_POINTER = 1,
  PATHCAL_STATUS_INVALID_ARGUMENT = 2,
  PATHCAL_STATUS_MISSING_ARTIFACT = 3,
  PATHCAL_STATUS_IO = 4,
  PATHCAL_STATUS_NUMERIC = 5,
  PATHCAL_STATUS_PARSE = 6,
  PATHCAL_STATUS_STAGE = 7,
  PATHCAL_STATUS_PANIC = 8,
} PathcalStatus;

typedef enum {
  PATHCAL_OOD_METHOD_MSP = 0,
  PATHCAL_OOD_METHOD_ENTROPY = 1,
} PathcalOodMethod;

typedef enum {
  PATHCAL_TASK_TOY_VISION = 0,
  PATHCAL_TASK_TOY_TEXT = 1,
  PATHCAL_TASK_TABULAR = 2,
} PathcalTask;

/**
 * A validated set of predicted class distributions with labels.
 */
typedef struct PathcalPredictions PathcalPredictions;

/**
 * An opened run directory.
 */
typedef struct PathcalRun PathcalRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *pathcal_version(void);

/**
 * Message of the last failing call on this thread; empty if none. Valid
 * until the next failing call on the same thread.
 */
const char *pathcal_last_error(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void pathcal_string_free(char *s);

/**
 * Builds a prediction set from `n` rows of `n_classes` probabilities
 * (row-major) and `n` labels. Rows must lie on the simplex.
 *
 * # Safety
 * `probs` must hold `n * n_classes` values and `labels` `n` values.
 */
PathcalStatus pathcal_predictions_new(const double *probs,
                                      size_t n,
                                      size_t n_classes,
                                      const uint32_t *labels,
                                      PathcalPredictions **out);

/**
 * Reads a `prob_0..prob_{C-1},label` CSV file.
 *
 * # Safety
 * `path` must be a NUL-terminated string.
 */
PathcalStatus pathcal_predictions_read_csv(const char *path, PathcalPredictions **out);

/**
 * # Safety
 * `p` must come from this library and not be freed twice.
 */
void pathcal_predictions_free(PathcalPredictions *p);

/**
 * Number of rows, or 0 for a null handle.
 *
 * # Safety
 * `p` must be null or a live handle.
 */
size_t pathcal_predictions_len(const PathcalPredictions *p);

/**
 * Top-1 accuracy.
 *
 * # Safety
 * `p` must be a live handle and `out` writable.
 */
PathcalStatus pathcal_accuracy(const PathcalPredictions *p, double *out);

/**
 * Mean negative log-likelihood with the 1e-12 probability floor.
 *
 * # Safety
 * `p` must be a live handle and `out` writable.
 */
PathcalStatus pathcal_nll(const PathcalPredictions *p, double *out);

/**
 * Mean squared distance to the one-hot label.
 *
 * # Safety
 * `p` must be a live handle and `out` writable.
 */
PathcalStatus pathcal_brier(const PathcalPredictions *p, double *out);

/**
 * Matthews correlation; binary sets only.
 *
 * # Safety
 * `p` must be a live handle and `out` writable.
 */
PathcalStatus pathcal_mcc(const PathcalPredictions *p, double *out);

/**
 * Area under the risk-coverage curve.
 *
 * # Safety
 * `p` must be a live handle and `out` writable.
 */
PathcalStatus pathcal_aurc(const PathcalPredictions *p, double *out);

/**
 * AUROC of confidence separating correct from wrong predictions.
 *
 * # Safety
 * `p` must be a live handle and `out` writable.
 */
PathcalStatus pathcal_failure_auroc(const PathcalPredictions *p, double *out);

/**
 * False-positive rate at 95% true-positive rate, correct as positive.
 *
 * # Safety
 * `p` must be a live handle and `out` writable.
 */
PathcalStatus pathcal_fpr95(const PathcalPredictions *p, double *out);

/**
 * Expected calibration error over `n_bins` equal-width bins.
 *
 * # Safety
 * `p` must be a live handle and `out` writable.
 */
PathcalStatus pathcal_ece(const PathcalPredictions *p, size_t n_bins, double *out);

/**
 * OOD AUROC and AUPR with in-distribution as the positive class.
 *
 * # Safety
 * Both handles must be live; `auroc` and `aupr` writable.
 */
PathcalStatus pathcal_ood_eval(const PathcalPredictions *in_dist,
                               const PathcalPredictions *out_dist,
                               PathcalOodMethod method,
                               double *auroc,
                               double *aupr);

/**
 * Full calibration report as a JSON string; free with
 * [`pathcal_string_free`].
 *
 * # Safety
 * `p` must be a live handle and `out` writable.
 */
PathcalStatus pathcal_report_json(const PathcalPredictions *p, size_t n_bins, char **out);

/**
 * `KL(N(p_mean, L Lᵀ) ‖ N(q_mean, diag(q_scale²)))` with `L` given as a
 * row-major `k x k` factor.
 *
 * # Safety
 * `p_factor` must hold `k * k` values; the vectors `k` each.
 */
PathcalStatus pathcal_kl_gaussian(size_t k,
                                  const double *p_mean,
                                  const double *p_factor,
                                  const double *q_mean,
                                  const double *q_scale,
                                  double *out);

/**
 * Default run configuration for `task` as TOML.
 *
 * # Safety
 * `out` must be writable; free the result with [`pathcal_string_free`].
 */
PathcalStatus pathcal_default_config(PathcalTask task, char **out);

/**
 * Opens a run from TOML `config_text`. A non-null `out_dir` overrides
 * the configured directory; `resume` reuses finished stages.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` writable.
 */
PathcalStatus pathcal_run_open(const char *config_text,
                               const char *out_dir,
                               bool resume,
                               PathcalRun **out);

/**
 * Runs every stage. `distilled_ece` and `backbone_ece` may be null.
 *
 * # Safety
 * `run` must be a live handle.
 */
PathcalStatus pathcal_run_all(const PathcalRun *run, double *backbone_ece, double *distilled_ece);

/**
 * Run directory of `run`; free with [`pathcal_string_free`].
 *
 * # Safety
 * `run` must be a live handle and `out` writable.
 */
PathcalStatus pathcal_run_dir(const PathcalRun *run, char **out);

/**
 * # Safety
 * `run` must come from this library and not be freed twice.
 */
void pathcal_run_free(PathcalRun *run);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PATHCAL_H */

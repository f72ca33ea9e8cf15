#ifndef CAMRL_H
#define CAMRL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CamrlStatus {
  CAMRL_STATUS_OK = 0,
  CAMRL_STATUS_NULL_POINTER = 1,
  CAMRL_STATUS_INVALID_ARGUMENT = 2,
  CAMRL_STATUS_DIMENSION_MISMATCH = 3,
  CAMRL_STATUS_INFEASIBLE = 4,
  CAMRL_STATUS_CONFIG = 5,
  CAMRL_STATUS_NUMERICAL = 6,
  CAMRL_STATUS_IO = 7,
  CAMRL_STATUS_PANIC = 8,
} CamrlStatus;

/**
 * A training run.
 */
typedef struct CamrlExperiment CamrlExperiment;

/**
 * A transfer matrix.
 */
typedef struct CamrlTransfer CamrlTransfer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `cap`). Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t camrl_last_error(char *buf, size_t cap);

/**
 * Smooth descending ranks of `values` with sharpness `d`.
 *
 * # Safety
 * `values` and `out` must each hold `n` doubles.
 */
enum CamrlStatus camrl_smooth_rank(const double *values, size_t n, double d, double *out);

/**
 * Ranking loss of `values` against 1-based `targets`, and its gradient.
 * `grad` may be null.
 *
 * # Safety
 * `values`, `targets` and a non-null `grad` must each hold `n` elements.
 */
enum CamrlStatus camrl_rank_loss(const double *values,
                                 const size_t *targets,
                                 size_t n,
                                 double d,
                                 double *loss,
                                 double *grad);

/**
 * Euclidean projection of `x` onto `{y >= 0, |y|_1 <= radius}`.
 *
 * # Safety
 * `x` and `out` must each hold `n` doubles.
 */
enum CamrlStatus camrl_project_box_l1(const double *x, size_t n, double radius, double *out);

/**
 * Frank-Wolfe gap at feasible `x` for gradient `grad`.
 *
 * # Safety
 * `grad` and `x` must each hold `n` doubles; `out` must be valid.
 */
enum CamrlStatus camrl_fw_gap(const double *grad,
                              const double *x,
                              size_t n,
                              double radius,
                              double *out);

/**
 * Identity transfer matrix over `n` tasks.
 *
 * # Safety
 * `out` must be a valid pointer; the handle written there is owned by the caller.
 */
enum CamrlStatus camrl_transfer_new(size_t n, struct CamrlTransfer **out);

/**
 * Transfer matrix from `n * n` row-major entries. The invariants are not
 * checked here; see [`camrl_transfer_validate`].
 *
 * # Safety
 * `data` must hold `n * n` doubles and `out` must be valid.
 */
enum CamrlStatus camrl_transfer_from_rows(size_t n, const double *data, struct CamrlTransfer **out);

/**
 * # Safety
 * `m` must be null or a handle from this library, not yet freed.
 */
void camrl_transfer_free(struct CamrlTransfer *m);

/**
 * # Safety
 * `m` must be a live handle and `out` valid.
 */
enum CamrlStatus camrl_transfer_size(const struct CamrlTransfer *m, size_t *out);

/**
 * Copies all `n * n` entries, row-major.
 *
 * # Safety
 * `m` must be a live handle and `out` must hold `len` doubles.
 */
enum CamrlStatus camrl_transfer_data(const struct CamrlTransfer *m, double *out, size_t len);

/**
 * Copies the off-diagonal entries of row `t` (`n - 1` values).
 *
 * # Safety
 * `m` must be a live handle and `out` must hold `len` doubles.
 */
enum CamrlStatus camrl_transfer_outgoing_row(const struct CamrlTransfer *m,
                                             size_t t,
                                             double *out,
                                             size_t len);

/**
 * Replaces the off-diagonal entries of row `t`.
 *
 * # Safety
 * `m` must be a live handle and `row` must hold `len` doubles.
 */
enum CamrlStatus camrl_transfer_set_outgoing_row(struct CamrlTransfer *m,
                                                 size_t t,
                                                 const double *row,
                                                 size_t len);

/**
 * Checks unit diagonal, nonnegative entries and row budgets.
 *
 * # Safety
 * `m` must be a live handle.
 */
enum CamrlStatus camrl_transfer_validate(const struct CamrlTransfer *m, double radius);

/**
 * New matrix with one more task: the old block is kept and the new row
 * and column are zero apart from the diagonal.
 *
 * # Safety
 * `m` must be a live handle and `out` valid.
 */
enum CamrlStatus camrl_transfer_extend(const struct CamrlTransfer *m, struct CamrlTransfer **out);

/**
 * Builds an untrained experiment from a JSON run config. A null `json`
 * uses the defaults.
 *
 * # Safety
 * `json` must be null or a NUL-terminated string; `out` must be valid.
 */
enum CamrlStatus camrl_experiment_new(const char *json, struct CamrlExperiment **out);

/**
 * # Safety
 * `e` must be null or a handle from this library, not yet freed.
 */
void camrl_experiment_free(struct CamrlExperiment *e);

/**
 * Runs `epochs` epochs, preceded by the warmup on the first call.
 *
 * # Safety
 * `e` must be a live handle.
 */
enum CamrlStatus camrl_experiment_run(struct CamrlExperiment *e, size_t epochs);

/**
 * # Safety
 * `e` must be a live handle and `out` valid.
 */
enum CamrlStatus camrl_experiment_num_tasks(const struct CamrlExperiment *e, size_t *out);

/**
 * Number of epochs run so far, warmup included.
 *
 * # Safety
 * `e` must be a live handle and `out` valid.
 */
enum CamrlStatus camrl_experiment_epochs_run(const struct CamrlExperiment *e, size_t *out);

/**
 * Snapshot of the experiment's current transfer matrix as a new handle.
 *
 * # Safety
 * `e` must be a live handle and `out` valid.
 */
enum CamrlStatus camrl_experiment_transfer(const struct CamrlExperiment *e,
                                           struct CamrlTransfer **out);

/**
 * Latest evaluation reward of every task (`len` = number of tasks). Fails
 * before the first epoch.
 *
 * # Safety
 * `e` must be a live handle and `out` must hold `len` doubles.
 */
enum CamrlStatus camrl_experiment_eval_rewards(const struct CamrlExperiment *e,
                                               double *out,
                                               size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAMRL_H */

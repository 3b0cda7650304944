#ifndef MODELSMITH_H
#define MODELSMITH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes shared by every exported function.
 */
typedef enum MsmStatus {
  MSM_STATUS_OK = 0,
  MSM_STATUS_NULL_ARGUMENT = 1,
  MSM_STATUS_INVALID_ARGUMENT = 2,
  MSM_STATUS_INVALID_UTF8 = 3,
  MSM_STATUS_NOT_FOUND = 4,
  MSM_STATUS_FAILED = 5,
  MSM_STATUS_PANIC = 6,
} MsmStatus;

/*
 Transcript of a finished run directory.
 */
typedef struct MsmRun MsmRun;

/*
 Result of a synthetic baseline simulation.
 */
typedef struct MsmSimulation MsmSimulation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *msm_version(void);

/*
 Message for the last failed call on this thread; empty after a success.
 Valid until the next call on the same thread.
 */
const char *msm_last_error_message(void);

/*
 Releases a string returned by this library. Null is ignored.

 # Safety
 `s` must come from this library and not have been freed.
 */
void msm_string_free(char *s);

/*
 Tie-averaged rank percentiles of `scores` written to `out` (both `len`
 long).

 # Safety
 `scores` and `out` must point to `len` valid doubles.
 */
enum MsmStatus msm_rank_percentile(const double *scores, size_t len, double *out);

/*
 Weighted blend of `count` arrays of `len` values. With `use_threshold`
 the output is binarized at `threshold`.

 # Safety
 `inputs` must hold `count` pointers to `len` doubles each; `weights`
 must hold `count` doubles and `out` room for `len`.
 */
enum MsmStatus msm_weighted_blend(const double *const *inputs,
                                  size_t count,
                                  size_t len,
                                  const double *weights,
                                  bool use_threshold,
                                  double threshold,
                                  double *out);

/*
 Index (0-based) of the best of `count` metric values; ties go to the
 lowest index.

 # Safety
 `values` must point to `count` doubles and `out_index` to a `size_t`.
 */
enum MsmStatus msm_select_best(const double *values,
                               size_t count,
                               bool higher_is_better,
                               size_t *out_index);

/*
 Simulates `policy` ("greedy" or "mcgs") on the default synthetic task
 model for `steps` operator applications.

 # Safety
 `policy` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MsmStatus msm_sim_run(const char *policy,
                           size_t drafts,
                           size_t steps,
                           uint64_t seed,
                           struct MsmSimulation **out);

/*
 Best valid score of a simulation; `NotFound` when no node is valid.

 # Safety
 `sim` must be a live handle and `out` a valid pointer.
 */
enum MsmStatus msm_sim_best_score(const struct MsmSimulation *sim, double *out);

/*
 Tab-separated trajectory, one step per line. Free with
 [`msm_string_free`].

 # Safety
 `sim` must be a live handle and `out` a valid pointer.
 */
enum MsmStatus msm_sim_trajectory(const struct MsmSimulation *sim, char **out);

/*
 # Safety
 `sim` must come from [`msm_sim_run`] and not have been freed. Null is
 ignored.
 */
void msm_sim_free(struct MsmSimulation *sim);

/*
 Opens the transcript of a run directory.

 # Safety
 `run_dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MsmStatus msm_run_open(const char *run_dir, struct MsmRun **out);

/*
 Number of transcript records.

 # Safety
 `run` must be a live handle and `out` a valid pointer.
 */
enum MsmStatus msm_run_record_count(const struct MsmRun *run, size_t *out);

/*
 Run report as JSON lines. Free with [`msm_string_free`].

 # Safety
 `run` must be a live handle and `out` a valid pointer.
 */
enum MsmStatus msm_run_report_json(const struct MsmRun *run, char **out);

/*
 # Safety
 `run` must come from [`msm_run_open`] and not have been freed. Null is
 ignored.
 */
void msm_run_free(struct MsmRun *run);

/*
 Runs a task bundle end to end, as the `run` command does. The process
 exit code of that command is stored in `out_exit_code`; the return value
 only reports argument errors.

 # Safety
 `bundle` and `config` must be NUL-terminated strings; `run_dir` may be
 null to use the config's directory.
 */
enum MsmStatus msm_cmd_run(const char *bundle,
                           const char *config,
                           const char *run_dir,
                           int32_t *out_exit_code);

/*
 Replays a scripted run; stores the `replay` command's exit code.

 # Safety
 `run_dir` must be a NUL-terminated string and `out_exit_code` valid.
 */
enum MsmStatus msm_cmd_replay(const char *run_dir, int32_t *out_exit_code);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MODELSMITH_H */

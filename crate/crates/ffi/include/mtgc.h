#ifndef MTGC_H
#define MTGC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes. The first four match the CLI exit statuses.
 */
typedef enum MtgcStatus {
  MTGC_STATUS_OK = 0,
  MTGC_STATUS_CONFIG = 1,
  MTGC_STATUS_DIVERGED = 2,
  MTGC_STATUS_IO = 3,
  MTGC_STATUS_NULL_ARGUMENT = 4,
  MTGC_STATUS_INVALID_ARGUMENT = 5,
  MTGC_STATUS_BUFFER_TOO_SMALL = 6,
  MTGC_STATUS_PANIC = 7,
} MtgcStatus;

/*
 Which metric `mtgc_run_rounds_to_threshold` scans.
 */
typedef enum MtgcMetric {
  MTGC_METRIC_GRAD_NORM_SQ = 0,
  MTGC_METRIC_LOSS = 1,
} MtgcMetric;

/*
 A validated experiment description with its instance built.
 */
typedef struct MtgcExperiment MtgcExperiment;

/*
 Metric trace of one seed. A diverged run keeps the rows recorded before the failure.
 */
typedef struct MtgcRun MtgcRun;

/*
 One metric row. Optional columns that were not recorded are NaN.
 */
typedef struct MtgcRecord {
  uint64_t t;
  uint64_t e;
  double grad_norm_sq;
  double loss;
  double subopt;
  double client_drift;
  double group_drift;
  double delta1_sq;
  double delta2_sq_max;
  double z_sum_violation;
  double y_sum_violation;
} MtgcRecord;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *mtgc_version(void);

/*
 Message of the latest failure on this thread, or null. Valid until the next call
 into the library from the same thread.
 */
const char *mtgc_last_error(void);

/*
 Parses TOML config text and builds the instance.

 # Safety
 `toml` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MtgcStatus mtgc_experiment_new(const char *toml, struct MtgcExperiment **out);

/*
 Loads a config file; relative dataset paths resolve against its directory.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MtgcStatus mtgc_experiment_load(const char *path, struct MtgcExperiment **out);

/*
 # Safety
 `exp` must be null or a handle from this library that has not been freed.
 */
void mtgc_experiment_free(struct MtgcExperiment *exp);

/*
 Writes the 16-hex-digit spec hash into `buf`.

 # Safety
 `exp` must be a live handle; `buf`/`needed` as in the buffer contract.
 */
enum MtgcStatus mtgc_experiment_spec_hash(const struct MtgcExperiment *exp,
                                          char *buf,
                                          size_t len,
                                          size_t *needed);

/*
 Step size the instance resolved to (after `"auto"`), or NaN for a null handle.

 # Safety
 `exp` must be null or a live handle.
 */
double mtgc_experiment_gamma(const struct MtgcExperiment *exp);

/*
 Trains one seed in memory. On divergence the status is `Diverged` and `out` still
 receives a run holding the partial trace.

 # Safety
 `exp` must be a live handle and `out` a valid pointer.
 */
enum MtgcStatus mtgc_experiment_run_seed(const struct MtgcExperiment *exp,
                                         uint64_t seed,
                                         struct MtgcRun **out);

/*
 Runs every configured seed and writes the usual output directory. A null
 `output_dir` keeps the configured one.

 # Safety
 `exp` must be a live handle; `output_dir` null or NUL-terminated.
 */
enum MtgcStatus mtgc_experiment_write(const struct MtgcExperiment *exp, const char *output_dir);

/*
 # Safety
 `run` must be null or a handle from this library that has not been freed.
 */
void mtgc_run_free(struct MtgcRun *run);

/*
 Number of metric rows, or 0 for a null handle.

 # Safety
 `run` must be null or a live handle.
 */
size_t mtgc_run_len(const struct MtgcRun *run);

/*
 # Safety
 `run` must be a live handle and `out` a valid pointer.
 */
enum MtgcStatus mtgc_run_record(const struct MtgcRun *run, size_t index, struct MtgcRecord *out);

/*
 Copies the trace in `metrics.csv` format into `buf`.

 # Safety
 `run` must be a live handle; `buf`/`needed` as in the buffer contract.
 */
enum MtgcStatus mtgc_run_metrics_csv(const struct MtgcRun *run,
                                     char *buf,
                                     size_t len,
                                     size_t *needed);

/*
 First global round whose metric is at or below `threshold`; writes -1 when the
 trace never gets there.

 # Safety
 `run` must be a live handle and `out` a valid pointer.
 */
enum MtgcStatus mtgc_run_rounds_to_threshold(const struct MtgcRun *run,
                                             double threshold,
                                             enum MtgcMetric metric,
                                             int64_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MTGC_H */

#ifndef FCIL_H
#define FCIL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FcilStatus {
  FCIL_STATUS_OK = 0,
  /**
   * A required pointer argument was NULL.
   */
  FCIL_STATUS_NULL_ARGUMENT = 1,
  /**
   * Input text was not valid UTF-8.
   */
  FCIL_STATUS_INVALID_UTF8 = 2,
  /**
   * The configuration failed to parse or validate.
   */
  FCIL_STATUS_CONFIG = 3,
  /**
   * The experiment or computation failed.
   */
  FCIL_STATUS_RUNTIME = 4,
  /**
   * Reading or writing a file failed.
   */
  FCIL_STATUS_IO = 5,
  /**
   * An index was outside the valid range.
   */
  FCIL_STATUS_OUT_OF_RANGE = 6,
  /**
   * The output buffer is too small; the required size was reported.
   */
  FCIL_STATUS_BUFFER_TOO_SMALL = 7,
  /**
   * A Rust panic was caught at the boundary.
   */
  FCIL_STATUS_PANIC = 8,
} FcilStatus;

/**
 * Opaque experiment configuration.
 */
typedef struct FcilConfig FcilConfig;

/**
 * Opaque result of a finished experiment.
 */
typedef struct FcilExperiment FcilExperiment;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message (empty after success).
 *
 * # Safety
 * `buf` must be NULL or point to `cap` writable bytes; `needed` must be NULL
 * or point to a writable `size_t`.
 */
enum FcilStatus fcil_last_error(char *buf, size_t cap, size_t *needed);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fcil_version(void);

/**
 * Parses and validates a TOML configuration.
 *
 * # Safety
 * `toml` must be a NUL-terminated string; `out` must be a writable pointer.
 */
enum FcilStatus fcil_config_from_toml(const char *toml, struct FcilConfig **out);

/**
 * Default synthetic configuration with the given seed.
 *
 * # Safety
 * `out` must be a writable pointer.
 */
enum FcilStatus fcil_config_default(uint64_t seed, struct FcilConfig **out);

/**
 * Applies one `key=value` override (value in TOML syntax). The config is
 * unchanged on failure.
 *
 * # Safety
 * `config` must be a live handle; `key_value` a NUL-terminated string.
 */
enum FcilStatus fcil_config_set(struct FcilConfig *config, const char *key_value);

/**
 * Writes the configuration as TOML into `buf` (see [`fcil_last_error`] for
 * the buffer protocol).
 *
 * # Safety
 * `config` must be a live handle; buffer rules as for [`fcil_last_error`].
 */
enum FcilStatus fcil_config_to_toml(const struct FcilConfig *config,
                                    char *buf,
                                    size_t cap,
                                    size_t *needed);

/**
 * # Safety
 * `config` must be NULL or a handle not yet freed.
 */
void fcil_config_free(struct FcilConfig *config);

/**
 * Runs the full experiment in memory.
 *
 * # Safety
 * `config` must be a live handle; `out` a writable pointer.
 */
enum FcilStatus fcil_experiment_run(const struct FcilConfig *config, struct FcilExperiment **out);

/**
 * Runs the experiment and writes the standard artifact layout to `dir`.
 *
 * # Safety
 * `config` must be a live handle; `dir` a NUL-terminated path.
 */
enum FcilStatus fcil_experiment_run_to_dir(const struct FcilConfig *config, const char *dir);

/**
 * Final all-seen accuracy and the mean over stages.
 *
 * # Safety
 * `exp` must be a live handle; `a_n` and `avg` writable.
 */
enum FcilStatus fcil_experiment_summary(const struct FcilExperiment *exp, double *a_n, double *avg);

/**
 * Number of completed stages.
 *
 * # Safety
 * `exp` must be a live handle; `out` writable.
 */
enum FcilStatus fcil_experiment_stage_count(const struct FcilExperiment *exp, size_t *out);

/**
 * Accuracy on task `task` after stage `stage` (both 0-based, `task <= stage`).
 *
 * # Safety
 * `exp` must be a live handle; `out` writable.
 */
enum FcilStatus fcil_experiment_accuracy(const struct FcilExperiment *exp,
                                         size_t stage,
                                         size_t task,
                                         double *out);

/**
 * Copies the experiment record as JSON.
 *
 * # Safety
 * `exp` must be a live handle; buffer rules as for [`fcil_last_error`].
 */
enum FcilStatus fcil_experiment_record_json(const struct FcilExperiment *exp,
                                            char *buf,
                                            size_t cap,
                                            size_t *needed);

/**
 * # Safety
 * `exp` must be NULL or a handle not yet freed.
 */
void fcil_experiment_free(struct FcilExperiment *exp);

/**
 * Re-weights `k` client prototypes of one class.
 *
 * `prototypes` and `means` are row-major `k × dim` arrays (a zero row in
 * `means` marks a client without samples). Writes `k` weights and the
 * `dim`-long global prototype.
 *
 * # Safety
 * Input arrays must hold `k * dim` doubles; `weights_out` must hold `k`,
 * `prototype_out` `dim`.
 */
enum FcilStatus fcil_prototype_reweight(size_t k,
                                        size_t dim,
                                        const double *prototypes,
                                        const double *means,
                                        double eta,
                                        double *weights_out,
                                        double *prototype_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FCIL_H */

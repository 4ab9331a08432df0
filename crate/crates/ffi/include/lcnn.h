#ifndef LCNN_H
#define LCNN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LcnnStatus {
  LCNN_STATUS_OK = 0,
  LCNN_STATUS_NULL_POINTER = 1,
  LCNN_STATUS_INVALID_ARGUMENT = 2,
  LCNN_STATUS_DIMENSION_MISMATCH = 3,
  LCNN_STATUS_UNKNOWN_TASK = 4,
  LCNN_STATUS_IO = 5,
  LCNN_STATUS_PARSE = 6,
  LCNN_STATUS_NUMERIC = 7,
  LCNN_STATUS_PANIC = 8,
} LcnnStatus;

/*
 Opaque model handle.
 */
typedef struct LcnnBundle LcnnBundle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Loads a bundle file written by the `lcnn` tool.

 # Safety
 `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum LcnnStatus lcnn_bundle_load(const char *path, struct LcnnBundle **out);

/*
 Parses a bundle from its JSON text.

 # Safety
 `json` must be a NUL-terminated string and `out` a writable pointer.
 */
enum LcnnStatus lcnn_bundle_from_json(const char *json, struct LcnnBundle **out);

/*
 Releases a handle; null is ignored.

 # Safety
 `bundle` must come from this library and not be used afterwards.
 */
void lcnn_bundle_free(struct LcnnBundle *bundle);

/*
 Input width, number of tasks and task-parameter dimension (0 for
 context-sensitive models). Null outputs are skipped.

 # Safety
 Non-null pointers must be valid.
 */
enum LcnnStatus lcnn_bundle_info(const struct LcnnBundle *bundle,
                                 size_t *x_dim,
                                 size_t *num_tasks,
                                 size_t *d_beta);

/*
 Index of the task with the given label.

 # Safety
 `label` must be a NUL-terminated string and `out` writable.
 */
enum LcnnStatus lcnn_task_index(const struct LcnnBundle *bundle, const char *label, size_t *out);

/*
 Predictions in original units for `n` rows of `x` (`n × x_dim`) with
 task indices `tasks`, written to `out` (`n` values).

 # Safety
 Pointers must cover the stated lengths.
 */
enum LcnnStatus lcnn_predict(const struct LcnnBundle *bundle,
                             const double *x,
                             const size_t *tasks,
                             size_t n,
                             double *out);

/*
 Predictions with explicit task parameters `beta` (`d` values).

 # Safety
 Pointers must cover the stated lengths.
 */
enum LcnnStatus lcnn_predict_with_beta(const struct LcnnBundle *bundle,
                                       const double *x,
                                       size_t n,
                                       const double *beta,
                                       size_t d,
                                       double *out);

/*
 Task parameters for a new task from `n` raw observations, with the
 stored tasks as prior. Writes `d` values to `beta_out`, which must equal
 the bundle's task-parameter dimension, and the objective value to
 `objective_out` when non-null.

 # Safety
 Pointers must cover the stated lengths.
 */
enum LcnnStatus lcnn_fit_new_task(const struct LcnnBundle *bundle,
                                  const double *x,
                                  const double *y,
                                  size_t n,
                                  uint64_t seed,
                                  double *beta_out,
                                  size_t d,
                                  double *objective_out);

/*
 Message of the last failed call on this thread, or null. Valid until the
 next call on the same thread.
 */
const char *lcnn_last_error(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LCNN_H */

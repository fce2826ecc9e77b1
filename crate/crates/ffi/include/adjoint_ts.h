/* C interface for the adjoint-ts discrete adjoint sensitivity library. */

#pragma once

/* Generated with cbindgen:0.27.0 */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Action kinds in a checkpointing schedule.
 */
typedef enum AdjTsActionKind {
  AdjTsActionKind_Store = 0,
  AdjTsActionKind_Advance = 1,
  AdjTsActionKind_Restore = 2,
  AdjTsActionKind_AdjoinStep = 3,
  AdjTsActionKind_Discard = 4,
} AdjTsActionKind;

/**
 * Checkpoint unit type for bounded-memory reverse sweeps.
 */
typedef enum AdjTsCheckpointMode {
  AdjTsCheckpointMode_SolutionOnly = 0,
  AdjTsCheckpointMode_SolutionWithStages = 1,
} AdjTsCheckpointMode;

/**
 * Time integration method selector.
 */
typedef enum AdjTsMethod {
  /**
   * Theta method; the `theta` argument selects the blend
   * (1 = backward Euler, 0.5 = Crank-Nicolson, 0 = explicit).
   */
  AdjTsMethod_Theta = 0,
  /**
   * Classic fourth-order Runge-Kutta.
   */
  AdjTsMethod_Rk4 = 1,
} AdjTsMethod;

/**
 * Status code returned by every API call.
 */
typedef enum AdjTsStatus {
  AdjTsStatus_Ok = 0,
  AdjTsStatus_NullPointer = 1,
  AdjTsStatus_InvalidUtf8 = 2,
  AdjTsStatus_UnknownProblem = 3,
  AdjTsStatus_InvalidArgument = 4,
  AdjTsStatus_SolveFailed = 5,
  AdjTsStatus_BufferTooSmall = 6,
  AdjTsStatus_InternalPanic = 7,
} AdjTsStatus;

/**
 * Opaque problem handle: a registered problem plus its stepping setup.
 */
typedef struct AdjTsProblem AdjTsProblem;

/**
 * Opaque checkpoint schedule handle.
 */
typedef struct AdjTsSchedule AdjTsSchedule;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Create a problem handle by registered name (`aircraft`, `grayscott`,
 * `linear-test`). Pass 0 for `grid` or `steps` to use the problem default.
 *
 * # Safety
 * `name` must be a valid NUL-terminated string; `out` must be a valid
 * pointer. The returned handle must be released with
 * [`adjts_problem_free`].
 */
enum AdjTsStatus adjts_problem_create(const char *name,
                                      size_t grid,
                                      enum AdjTsMethod method,
                                      double theta,
                                      size_t steps,
                                      struct AdjTsProblem **out);

/**
 * Release a problem handle. Passing NULL is a no-op.
 *
 * # Safety
 * `p` must be a handle from [`adjts_problem_create`], not yet freed.
 */
void adjts_problem_free(struct AdjTsProblem *p);

/**
 * Number of optimization parameters of the problem.
 *
 * # Safety
 * `p` and `out` must be valid pointers.
 */
enum AdjTsStatus adjts_problem_num_params(const struct AdjTsProblem *p, size_t *out);

/**
 * State dimension of the problem.
 *
 * # Safety
 * `p` and `out` must be valid pointers.
 */
enum AdjTsStatus adjts_problem_num_states(const struct AdjTsProblem *p, size_t *out);

/**
 * Copy the problem's default starting parameters into `buf`.
 *
 * # Safety
 * `buf` must point to at least `len` doubles.
 */
enum AdjTsStatus adjts_problem_initial_params(const struct AdjTsProblem *p,
                                              double *buf,
                                              size_t len);

/**
 * Evaluate the cost at the given parameters.
 *
 * # Safety
 * `params` must point to `len` doubles; `out_cost` must be valid.
 */
enum AdjTsStatus adjts_cost(const struct AdjTsProblem *p,
                            const double *params,
                            size_t len,
                            double *out_cost);

/**
 * Evaluate cost and adjoint gradient. `capacity = 0` keeps the whole
 * trajectory in memory; a positive capacity runs the reverse sweep through
 * the checkpointing provider.
 *
 * # Safety
 * `params` and `out_grad` must point to `len` doubles; `out_cost` must be a
 * valid pointer.
 */
enum AdjTsStatus adjts_gradient(const struct AdjTsProblem *p,
                                const double *params,
                                size_t len,
                                size_t capacity,
                                enum AdjTsCheckpointMode mode,
                                double *out_cost,
                                double *out_grad);

/**
 * Hessian-vector product of the cost with respect to the parameters.
 *
 * # Safety
 * `params`, `sigma`, and `out_hvp` must point to `len` doubles each.
 */
enum AdjTsStatus adjts_hvp(const struct AdjTsProblem *p,
                           const double *params,
                           const double *sigma,
                           size_t len,
                           double *out_hvp);

/**
 * Plan an optimal checkpointing schedule.
 *
 * # Safety
 * `out` must be a valid pointer; the returned handle must be released with
 * [`adjts_schedule_free`].
 */
enum AdjTsStatus adjts_schedule_plan(size_t num_steps,
                                     size_t capacity,
                                     enum AdjTsCheckpointMode mode,
                                     struct AdjTsSchedule **out);

/**
 * Release a schedule handle. Passing NULL is a no-op.
 *
 * # Safety
 * `s` must be a handle from [`adjts_schedule_plan`], not yet freed.
 */
void adjts_schedule_free(struct AdjTsSchedule *s);

/**
 * Number of recomputed forward steps the schedule incurs.
 *
 * # Safety
 * `s` and `out` must be valid pointers.
 */
enum AdjTsStatus adjts_schedule_recomputations(const struct AdjTsSchedule *s, size_t *out);

/**
 * Number of actions in the schedule.
 *
 * # Safety
 * `s` and `out` must be valid pointers.
 */
enum AdjTsStatus adjts_schedule_num_actions(const struct AdjTsSchedule *s, size_t *out);

/**
 * Decode action `idx`: kind plus two operands (`Advance` uses both as
 * `from`/`to`; the others put the step index in the first).
 *
 * # Safety
 * All output pointers must be valid.
 */
enum AdjTsStatus adjts_schedule_action(const struct AdjTsSchedule *s,
                                       size_t idx,
                                       enum AdjTsActionKind *out_kind,
                                       size_t *out_a,
                                       size_t *out_b);

/**
 * Copy the last error message (NUL-terminated, possibly truncated) into
 * `buf`. Returns the full message length in bytes, excluding the NUL.
 *
 * # Safety
 * `buf` must point to `len` writable bytes (may be NULL to query the size).
 */
size_t adjts_last_error_message(char *buf, size_t len);

/**
 * Library version as a static string.
 */
const char *adjts_version(void);

/**
 * ABI sanity value: returns 0x41445453 ("ADTS").
 */
int adjts_abi_magic(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

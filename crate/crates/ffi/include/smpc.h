#ifndef SMPC_H
#define SMPC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum SmpcStatus {
  SMPC_STATUS_OK = 0,
  SMPC_STATUS_NULL_POINTER = 1,
  SMPC_STATUS_INVALID_UTF8 = 2,
  SMPC_STATUS_CONFIG = 3,
  SMPC_STATUS_DIMENSION = 4,
  SMPC_STATUS_USAGE = 5,
  SMPC_STATUS_INFEASIBLE = 6,
  /**
   * The OCP solve ended without a solution; outputs hold the best iterate.
   */
  SMPC_STATUS_NOT_SOLVED = 7,
  SMPC_STATUS_IO = 8,
  SMPC_STATUS_BUFFER_TOO_SMALL = 9,
  SMPC_STATUS_PANIC = 10,
} SmpcStatus;

/**
 * Receding-horizon controller that warm starts from its previous solution.
 */
typedef struct SmpcController SmpcController;

/**
 * Parsed configuration with its model, design and OCP.
 */
typedef struct SmpcScenario SmpcScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Builds a scenario from TOML text. On success `*out` owns a handle to be
 * released with `smpc_scenario_free`.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SmpcStatus smpc_scenario_from_toml(const char *text, struct SmpcScenario **out);

/**
 * Builds a scenario from a TOML file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SmpcStatus smpc_scenario_load(const char *path, struct SmpcScenario **out);

/**
 * Releases a scenario; null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void smpc_scenario_free(struct SmpcScenario *s);

/**
 * State dimension, 0 for a null handle.
 *
 * # Safety
 * `s` must be null or a live scenario.
 */
size_t smpc_state_dim(const struct SmpcScenario *s);

/**
 * Input dimension, 0 for a null handle.
 *
 * # Safety
 * `s` must be null or a live scenario.
 */
size_t smpc_input_dim(const struct SmpcScenario *s);

/**
 * Prediction horizon, 0 for a null handle.
 *
 * # Safety
 * `s` must be null or a live scenario.
 */
size_t smpc_horizon(const struct SmpcScenario *s);

/**
 * Runs the sampled design check; `*passed` is 1 when every check passed.
 *
 * # Safety
 * `s` must be a live scenario and `passed` a valid pointer.
 */
enum SmpcStatus smpc_design_check(const struct SmpcScenario *s, uint64_t seed, int32_t *passed);

/**
 * Cold-started OCP solve from `x0`; writes `u*_{0}` to `u_out` and `V_N` to
 * `value` (nullable). Returns `NotSolved` when the solver stopped short.
 *
 * # Safety
 * Pointers must be valid for the given lengths.
 */
enum SmpcStatus smpc_solve(const struct SmpcScenario *s,
                           const double *x0,
                           size_t n,
                           double *u_out,
                           size_t m,
                           double *value);

/**
 * Creates a controller bound to `s`; the scenario may be freed afterwards.
 *
 * # Safety
 * `s` must be a live scenario and `out` a valid pointer.
 */
enum SmpcStatus smpc_controller_new(const struct SmpcScenario *s, struct SmpcController **out);

/**
 * Releases a controller; null is ignored.
 *
 * # Safety
 * `c` must come from this library and not be used afterwards.
 */
void smpc_controller_free(struct SmpcController *c);

/**
 * One receding-horizon step at the measured state: solves warm started
 * from the shifted previous solution and writes the input to apply. After
 * a failed solve the shifted candidate's input is written, `*fallback` is
 * set to 1 and `Ok` is returned; a failure without previous solution
 * returns `Infeasible`.
 *
 * # Safety
 * Pointers must be valid for the given lengths; `fallback` may be null.
 */
enum SmpcStatus smpc_controller_step(struct SmpcController *c,
                                     const double *x,
                                     size_t n,
                                     double *u_out,
                                     size_t m,
                                     int32_t *fallback);

/**
 * Runs the configured closed-loop simulation with `seed`; writes the pooled
 * joint chance-constraint satisfaction rate and the number of steps.
 *
 * # Safety
 * `s` must be a live scenario; output pointers must be valid.
 */
enum SmpcStatus smpc_simulate(const struct SmpcScenario *s,
                              uint64_t seed,
                              double *rate,
                              size_t *steps);

/**
 * Copies the calling thread's last error message, NUL terminated, into
 * `buf`. `*needed` (nullable) receives the required size including the NUL.
 *
 * # Safety
 * `buf` must be valid for `len` bytes or null with `len == 0`.
 */
enum SmpcStatus smpc_last_error(char *buf, size_t len, size_t *needed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SMPC_H */

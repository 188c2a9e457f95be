#ifndef SATMPC_H
#define SATMPC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// `mode` argument: use the configured `sim.mode`.
#define SATMPC_MODE_CONFIG -1

#define SATMPC_MODE_MPC 0

#define SATMPC_MODE_RHC 1

typedef enum SatmpcStatus {
  SATMPC_STATUS_OK = 0,
  // Null pointer or wrong buffer length.
  SATMPC_STATUS_INVALID_ARGUMENT = 1,
  // Configuration, dimension or input validation error.
  SATMPC_STATUS_CONFIG = 2,
  SATMPC_STATUS_NUMERICAL = 3,
  SATMPC_STATUS_NOT_CERTIFIABLE = 4,
  SATMPC_STATUS_IO = 5,
  SATMPC_STATUS_PANIC = 6,
} SatmpcStatus;

typedef struct SatmpcPolicy SatmpcPolicy;

// A validated run configuration with its moment matrices.
typedef struct SatmpcProblem SatmpcProblem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null. Valid until the next
// failing call on the same thread.
const char *satmpc_last_error(void);

// Parses a JSON configuration and computes its moment matrices.
//
// # Safety
// `json` must be a nul-terminated string; `out` must be writable.
enum SatmpcStatus satmpc_problem_new(const char *json, struct SatmpcProblem **out);

// The built-in numerical example.
//
// # Safety
// `out` must be writable.
enum SatmpcStatus satmpc_problem_paper_preset(struct SatmpcProblem **out);

// # Safety
// `problem` must come from `satmpc_problem_new` or be null.
void satmpc_problem_free(struct SatmpcProblem *problem);

// State dimension `n`, or 0 for a null handle.
//
// # Safety
// `problem` must be a live handle or null.
size_t satmpc_problem_state_dim(const struct SatmpcProblem *problem);

// # Safety
// `problem` must be a live handle or null.
size_t satmpc_problem_input_dim(const struct SatmpcProblem *problem);

// # Safety
// `problem` must be a live handle or null.
size_t satmpc_problem_horizon(const struct SatmpcProblem *problem);

// Writes the moment matrices as JSON into `*out`.
//
// # Safety
// `problem` must be a live handle; `out` must be writable.
enum SatmpcStatus satmpc_moments_json(const struct SatmpcProblem *problem, char **out);

// Solves the policy program at `x0` (length `n`).
//
// # Safety
// `x0` must point to `len` doubles; `out` must be writable.
enum SatmpcStatus satmpc_solve(const struct SatmpcProblem *problem,
                               const double *x0,
                               size_t len,
                               struct SatmpcPolicy **out);

// # Safety
// `policy` must come from `satmpc_solve` or be null.
void satmpc_policy_free(struct SatmpcPolicy *policy);

// Rows of `Ḡ` (and length of `d̄`), `N·m`.
//
// # Safety
// `policy` must be a live handle or null.
size_t satmpc_policy_rows(const struct SatmpcPolicy *policy);

// Columns of `Ḡ`, `N·n`.
//
// # Safety
// `policy` must be a live handle or null.
size_t satmpc_policy_cols(const struct SatmpcPolicy *policy);

// Copies `d̄` into `buf`, which must hold exactly `satmpc_policy_rows` doubles.
//
// # Safety
// `buf` must point to `len` writable doubles.
enum SatmpcStatus satmpc_policy_d_bar(const struct SatmpcPolicy *policy, double *buf, size_t len);

// Copies `Ḡ` row-major into `buf` of exactly `rows * cols` doubles.
//
// # Safety
// `buf` must point to `len` writable doubles.
enum SatmpcStatus satmpc_policy_g_bar(const struct SatmpcPolicy *policy, double *buf, size_t len);

// Objective without the constant term; NaN for a null handle.
//
// # Safety
// `policy` must be a live handle or null.
double satmpc_policy_objective(const struct SatmpcPolicy *policy);

// Full expected cost including the constant term.
//
// # Safety
// `policy` must be a live handle or null.
double satmpc_policy_expected_cost(const struct SatmpcPolicy *policy);

// # Safety
// `policy` must be a live handle or null.
double satmpc_policy_feasibility_margin(const struct SatmpcPolicy *policy);

// # Safety
// `policy` must be a live handle or null.
double satmpc_policy_kkt_residual(const struct SatmpcPolicy *policy);

// Runs the configured closed-loop simulation and writes the summary JSON.
//
// # Safety
// `problem` must be a live handle; `out` must be writable.
enum SatmpcStatus satmpc_simulate_json(const struct SatmpcProblem *problem,
                                       int32_t mode,
                                       char **out);

// Drift certificate as JSON. Returns `NotCertifiable` for a non-Schur `A`.
//
// # Safety
// `problem` must be a live handle; `out` must be writable.
enum SatmpcStatus satmpc_certify_json(const struct SatmpcProblem *problem,
                                      int32_t mode,
                                      char **out);

// # Safety
// `s` must come from this library or be null.
void satmpc_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SATMPC_H */

#ifndef ESOAFL_H
#define ESOAFL_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every entry point.
typedef enum EsoaflStatus {
  ESOAFL_STATUS_OK = 0,
  // A pointer argument was null.
  ESOAFL_STATUS_NULL_POINTER = 1,
  // An argument fell outside its mathematical domain.
  ESOAFL_STATUS_DOMAIN_ERROR = 2,
  // Inputs were structurally invalid (bad spec, bad config, bad UTF-8).
  ESOAFL_STATUS_INVALID_ARGUMENT = 3,
  // A solver failed to converge.
  ESOAFL_STATUS_SOLVER_FAILURE = 4,
  // The requested run finished without reaching its target.
  ESOAFL_STATUS_NOT_CONVERGED = 5,
  // Filesystem failure.
  ESOAFL_STATUS_IO_ERROR = 6,
} EsoaflStatus;

// Opaque joint-controller problem handle.
typedef struct EsoaflJcpProblem EsoaflJcpProblem;

// Inputs of the convergence bound.
typedef struct EsoaflBoundParams {
  double smoothness;
  double grad_var;
  double noise_var;
  double init_gap;
  double eta;
  double theta;
  uint32_t local_iters;
  uint32_t rounds;
  uint32_t clients;
  double tx_prob;
  double quant_q;
} EsoaflBoundParams;

// Solution of the joint controller.
typedef struct EsoaflJcpSolution {
  double tx_prob;
  uint32_t local_iters;
  double objective;
  uint64_t iterations;
  bool converged;
} EsoaflJcpSolution;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Exponential integral E1(x) for x > 0.
//
// # Safety
// `out` must be a valid pointer to a double.
enum EsoaflStatus esoafl_e1(double x, double *out);

// Average communication power under threshold power control; `exact != 0`
// selects the exponential-integral form, otherwise the elementary upper
// bound used inside the optimizer.
//
// # Safety
// `out` must be a valid pointer to a double.
enum EsoaflStatus esoafl_comm_power(double tx_prob,
                                    double rho,
                                    double rate,
                                    int32_t exact,
                                    double *out);

// Transmission probability induced by a channel-gain threshold.
//
// # Safety
// `out` must be a valid pointer to a double.
enum EsoaflStatus esoafl_probability_from_threshold(double gain_threshold,
                                                    double rate,
                                                    double *out);

// Channel-gain threshold achieving a transmission probability.
//
// # Safety
// `out` must be a valid pointer to a double.
enum EsoaflStatus esoafl_threshold_from_probability(double tx_prob, double rate, double *out);

// Budget-limited maximum transmission probability
// `exp(-rate * rho / power_budget)`.
//
// # Safety
// `out` must be a valid pointer to a double.
enum EsoaflStatus esoafl_max_tx_probability(double rate,
                                            double rho,
                                            double power_budget,
                                            double *out);

// Monte-Carlo estimate of the quantizer variance constant `q` under the
// common-scale regime, with its standard error.
//
// # Safety
// `out_q` and `out_se` must be valid pointers to doubles.
enum EsoaflStatus esoafl_estimate_quant_constant(uint8_t bits,
                                                 size_t dim,
                                                 size_t clients,
                                                 size_t trials,
                                                 uint64_t seed,
                                                 double *out_q,
                                                 double *out_se);

// Evaluate the convergence bound; fails with `DomainError` when the
// learning-rate condition is violated.
//
// # Safety
// `out` must be a valid pointer to a double.
enum EsoaflStatus esoafl_convergence_bound(struct EsoaflBoundParams params, double *out);

// Round-count model `a (p+q)/(p H) + b sqrt((p+q)/(p H)) + c`.
//
// # Safety
// `out` must be a valid pointer to a double.
enum EsoaflStatus esoafl_rounds_model(double local_iters,
                                      double tx_prob,
                                      double a,
                                      double b,
                                      double c,
                                      double q,
                                      double *out);

// Build a controller problem. Returns null when the instance is invalid.
struct EsoaflJcpProblem *esoafl_jcp_problem_new(double a,
                                                double b,
                                                double c,
                                                double q,
                                                double rho,
                                                double rate,
                                                double comm_time,
                                                double comp_energy,
                                                double max_tx_prob,
                                                uint32_t min_local_iters,
                                                uint32_t max_local_iters);

// Release a controller problem.
//
// # Safety
// `problem` must be a pointer from [`esoafl_jcp_problem_new`], not yet
// freed; null is ignored.
void esoafl_jcp_problem_free(struct EsoaflJcpProblem *problem);

// Total-energy objective at a point of the decision space.
//
// # Safety
// `problem` must be a live handle from [`esoafl_jcp_problem_new`]; `out`
// must be a valid pointer to a double.
enum EsoaflStatus esoafl_jcp_objective(const struct EsoaflJcpProblem *problem,
                                       double tx_prob,
                                       double local_iters,
                                       double *out);

// Run the inner-convex-approximation control loop and report the solution.
//
// # Safety
// `problem` must be a live handle from [`esoafl_jcp_problem_new`]; `out`
// must be a valid pointer to an [`EsoaflJcpSolution`].
enum EsoaflStatus esoafl_jcp_solve(const struct EsoaflJcpProblem *problem,
                                   double initial_step,
                                   double step_decay,
                                   double move_tol,
                                   struct EsoaflJcpSolution *out);

// Execute a whole experiment from a TOML configuration file; artifacts land
// in the configured output directory. Returns `NotConverged` when the task
// ran but missed its target.
//
// # Safety
// `config_path` must be a valid NUL-terminated string; it is only read.
enum EsoaflStatus esoafl_run_config(const char *config_path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ESOAFL_H */

#ifndef DERSITE_H
#define DERSITE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. `DERSITE_STATUS_OK` is zero; everything else is an error.
 */
typedef enum DersiteStatus {
  DERSITE_STATUS_OK = 0,
  DERSITE_STATUS_NULL_ARGUMENT = 1,
  DERSITE_STATUS_INVALID_UTF8 = 2,
  DERSITE_STATUS_IO = 3,
  DERSITE_STATUS_CASE_ERROR = 4,
  DERSITE_STATUS_CONFIG_ERROR = 5,
  DERSITE_STATUS_INVALID_ARGUMENT = 6,
  DERSITE_STATUS_INFEASIBLE = 7,
  DERSITE_STATUS_ITERATION_LIMIT = 8,
  DERSITE_STATUS_STUDY_FAILED = 9,
  DERSITE_STATUS_BUFFER_TOO_SMALL = 10,
  DERSITE_STATUS_PANIC = 99,
} DersiteStatus;

/**
 * DER dispatch mode for range probes.
 */
typedef enum DersiteDerMode {
  DERSITE_DER_MODE_NON_DISPATCHABLE_PQ = 0,
  DERSITE_DER_MODE_DISPATCHABLE_Q = 1,
  DERSITE_DER_MODE_DISPATCHABLE_PQ = 2,
} DersiteDerMode;

/**
 * A parsed network case.
 */
typedef struct DersiteCase DersiteCase;

/**
 * A converged OPF solution together with the case it was solved on.
 */
typedef struct DersiteSolution DersiteSolution;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *dersite_last_error(void);

/**
 * Library version, a static string.
 */
const char *dersite_version(void);

/**
 * Reads a MATPOWER `.m` or canonical `.json` case from `path`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum DersiteStatus dersite_case_load(const char *path, struct DersiteCase **out);

/**
 * Parses a case from canonical JSON text.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum DersiteStatus dersite_case_from_json(const char *json, struct DersiteCase **out);

/**
 * # Safety
 * `case` must come from this library and not be used afterwards. NULL is a no-op.
 */
void dersite_case_free(struct DersiteCase *case_);

/**
 * Number of buses in the case, 0 for NULL.
 *
 * # Safety
 * `case` must be NULL or a live handle.
 */
size_t dersite_case_n_buses(const struct DersiteCase *case_);

/**
 * Copies the bus ids in case order. `needed` (optional) receives the count.
 *
 * # Safety
 * `out` must hold `len` elements.
 */
enum DersiteStatus dersite_case_bus_ids(const struct DersiteCase *case_,
                                        uint32_t *out,
                                        size_t len,
                                        size_t *needed);

/**
 * New case with every bus load multiplied by `factor`.
 *
 * # Safety
 * `case` must be a live handle; `out` must be writable.
 */
enum DersiteStatus dersite_case_scale_loads(const struct DersiteCase *case_,
                                            double factor,
                                            struct DersiteCase **out);

/**
 * Solves the AC-OPF with default options. Only converged solutions produce
 * a handle; infeasible and iteration-limit outcomes return their codes.
 *
 * # Safety
 * `case` must be a live handle; `out` must be writable.
 */
enum DersiteStatus dersite_solve_opf(const struct DersiteCase *case_, struct DersiteSolution **out);

/**
 * # Safety
 * `solution` must come from this library and not be used afterwards. NULL is a no-op.
 */
void dersite_solution_free(struct DersiteSolution *solution);

/**
 * Optimal cost, $/h.
 *
 * # Safety
 * `solution` must be a live handle; `out` must be writable.
 */
enum DersiteStatus dersite_solution_objective(const struct DersiteSolution *solution, double *out);

/**
 * Active-power nodal prices, $/MWh, in case bus order.
 *
 * # Safety
 * `out` must hold `len` doubles; `needed` may be NULL.
 */
enum DersiteStatus dersite_solution_lambda_p(const struct DersiteSolution *solution,
                                             double *out,
                                             size_t len,
                                             size_t *needed);

/**
 * Generator active outputs, MW, in case generator order.
 *
 * # Safety
 * `out` must hold `len` doubles; `needed` may be NULL.
 */
enum DersiteStatus dersite_solution_p_gen(const struct DersiteSolution *solution,
                                          double *out,
                                          size_t len,
                                          size_t *needed);

/**
 * Number of inequality constraints in the binding set.
 *
 * # Safety
 * `solution` must be NULL or a live handle.
 */
size_t dersite_solution_n_binding(const struct DersiteSolution *solution);

/**
 * Stationarity, feasibility and complementarity residuals (per unit).
 *
 * # Safety
 * `solution` must be a live handle; the three outputs must be writable.
 */
enum DersiteStatus dersite_solution_kkt(const struct DersiteSolution *solution,
                                        double *stationarity,
                                        double *feasibility,
                                        double *complementarity);

/**
 * Largest injection (MW, up to `p_size`) of a DER probe at `bus` that keeps
 * the binding set unchanged.
 *
 * # Safety
 * `case` must be a live handle; `out` must be writable.
 */
enum DersiteStatus dersite_validity_range(const struct DersiteCase *case_,
                                          uint32_t bus,
                                          double p_size,
                                          double q_size,
                                          enum DersiteDerMode mode,
                                          double *out);

/**
 * Runs the studies of a TOML config (no files are written) and returns the
 * plans and comparison as a JSON string, freed with [`dersite_string_free`].
 *
 * # Safety
 * `config_path` must be a NUL-terminated string; `out` must be writable.
 */
enum DersiteStatus dersite_run_study(const char *config_path, char **out);

/**
 * # Safety
 * `s` must come from this library and not be used afterwards. NULL is a no-op.
 */
void dersite_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DERSITE_H */

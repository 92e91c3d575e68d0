#ifndef SNGD_H
#define SNGD_H

/* Generated by cbindgen from crates/sngd-ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Result of every call.
 */
typedef enum SngdStatus {
  SNGD_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  SNGD_STATUS_NULL_POINTER = 1,
  /**
   * Invalid configuration, kind or argument value.
   */
  SNGD_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Buffer or vector length does not match the object.
   */
  SNGD_STATUS_DIMENSION_MISMATCH = 3,
  /**
   * Non-finite values, failed factorizations or a step that left the
   * domain; the object passed in is left unchanged.
   */
  SNGD_STATUS_NUMERICAL = 4,
  /**
   * The objective lacks an oracle the method needs.
   */
  SNGD_STATUS_UNSUPPORTED = 5,
  /**
   * Input/output or serialization failure.
   */
  SNGD_STATUS_IO = 6,
  /**
   * A Rust panic was caught at the boundary.
   */
  SNGD_STATUS_INTERNAL = 7,
} SngdStatus;

/**
 * Factor structures of the precision square root `B`.
 */
typedef enum SngdGroup {
  /**
   * Dense invertible `B`.
   */
  SNGD_GROUP_FULL = 0,
  /**
   * Positive diagonal `B`.
   */
  SNGD_GROUP_DIAGONAL = 1,
  /**
   * Block upper triangular with a dense `k1 × k1` corner.
   */
  SNGD_GROUP_BLOCK_UPPER = 2,
  /**
   * Block lower triangular with a dense `k1 × k1` corner.
   */
  SNGD_GROUP_BLOCK_LOWER = 3,
  /**
   * Upper Heisenberg structure with dense corners `k1` and `k2`.
   */
  SNGD_GROUP_HEIS_UPPER = 4,
  /**
   * Lower Heisenberg structure with dense corners `k1` and `k2`.
   */
  SNGD_GROUP_HEIS_LOWER = 5,
} SngdGroup;

/**
 * Update rule used by [`sngd_gauss_step`].
 */
typedef enum SngdGaussMethod {
  /**
   * Deterministic Newton-like step with a dense Hessian (any factor kind is
   * densified; intended for `Full`).
   */
  SNGD_GAUSS_METHOD_FULL_NEWTON = 0,
  /**
   * Deterministic structured step using Hessian-vector products and the
   * Hessian diagonal (triangular and Heisenberg kinds).
   */
  SNGD_GAUSS_METHOD_STRUCTURED = 1,
  /**
   * Monte-Carlo variational step with second-order gradient estimates.
   */
  SNGD_GAUSS_METHOD_MONTE_CARLO = 2,
  /**
   * Monte-Carlo variational step with first-order (Stein) estimates.
   */
  SNGD_GAUSS_METHOD_MONTE_CARLO_FIRST_ORDER = 3,
} SngdGaussMethod;

/**
 * Opaque Adam state.
 */
typedef struct SngdAdam SngdAdam;

/**
 * Opaque structured factor.
 */
typedef struct SngdFactor SngdFactor;

/**
 * Opaque Gaussian search state `N(μ, (BBᵀ)⁻¹)`.
 */
typedef struct SngdGauss SngdGauss;

/**
 * Opaque objective.
 */
typedef struct SngdObjective SngdObjective;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sngd_version(void);

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next library call on the same thread.
 */
const char *sngd_last_error(void);

/**
 * Releases a string returned by the library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and must not be used afterwards.
 */
void sngd_string_free(char *s);

/**
 * Creates `B = scale · I` in the given structure. `k2` is ignored by the
 * block-triangular kinds and both block sizes by `Full` and `Diagonal`.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum SngdStatus sngd_factor_new(enum SngdGroup group,
                                size_t p,
                                size_t k1,
                                size_t k2,
                                double scale,
                                struct SngdFactor **out);

/**
 * Creates a factor from a dense row-major `p × p` matrix that must already
 * have the structure's sparsity pattern.
 *
 * # Safety
 * `dense` must point to `p * p` readable doubles; `out` must be writable.
 */
enum SngdStatus sngd_factor_from_dense(enum SngdGroup group,
                                       size_t p,
                                       size_t k1,
                                       size_t k2,
                                       const double *dense,
                                       struct SngdFactor **out);

/**
 * Releases a factor. Null is ignored.
 *
 * # Safety
 * `f` must come from this library and must not be used afterwards.
 */
void sngd_factor_free(struct SngdFactor *f);

/**
 * Side length `p` of the factor (0 for a null handle).
 *
 * # Safety
 * `f` must be null or a live factor handle.
 */
size_t sngd_factor_dim(const struct SngdFactor *f);

/**
 * Writes `B` (row-major, `p * p` entries).
 *
 * # Safety
 * `f` must be a live handle and `out` must point to `len` writable doubles.
 */
enum SngdStatus sngd_factor_dense(const struct SngdFactor *f, double *out, size_t len);

/**
 * Writes `S = BBᵀ` (row-major, `p * p` entries).
 *
 * # Safety
 * `f` must be a live handle and `out` must point to `len` writable doubles.
 */
enum SngdStatus sngd_factor_precision(const struct SngdFactor *f, double *out, size_t len);

/**
 * Solves `BBᵀ x = rhs` in the factor's structured cost.
 *
 * # Safety
 * `rhs` and `x` must each point to `p` doubles (`x` writable).
 */
enum SngdStatus sngd_factor_precision_solve(const struct SngdFactor *f,
                                            const double *rhs,
                                            double *x,
                                            size_t p);

/**
 * `log |det B|`.
 *
 * # Safety
 * `f` must be a live handle and `out` writable.
 */
enum SngdStatus sngd_factor_log_abs_det(const struct SngdFactor *f, double *out);

/**
 * Rosenbrock function in `p` dimensions (scaled by `1/p`).
 *
 * # Safety
 * `out` must be writable.
 */
enum SngdStatus sngd_objective_rosenbrock(size_t p, struct SngdObjective **out);

/**
 * Dixon-Price function in `p` dimensions (scaled by `1/p`).
 *
 * # Safety
 * `out` must be writable.
 */
enum SngdStatus sngd_objective_dixon_price(size_t p, struct SngdObjective **out);

/**
 * Quadratic `½wᵀHw − cᵀw` with symmetric row-major `H` (`p * p`) and `c`.
 *
 * # Safety
 * `h` must point to `p * p` doubles, `c` to `p` doubles, `out` writable.
 */
enum SngdStatus sngd_objective_quadratic(const double *h,
                                         const double *c,
                                         size_t p,
                                         struct SngdObjective **out);

/**
 * Releases an objective. Null is ignored.
 *
 * # Safety
 * `o` must come from this library and must not be used afterwards.
 */
void sngd_objective_free(struct SngdObjective *o);

/**
 * Dimension of the objective (0 for a null handle).
 *
 * # Safety
 * `o` must be null or a live handle.
 */
size_t sngd_objective_dim(const struct SngdObjective *o);

/**
 * Loss value at `w`.
 *
 * # Safety
 * `w` must point to `p` doubles and `out` must be writable.
 */
enum SngdStatus sngd_objective_eval(const struct SngdObjective *o,
                                    const double *w,
                                    size_t p,
                                    double *out);

/**
 * Gradient at `w` written to `grad` (`p` entries).
 *
 * # Safety
 * `w` and `grad` must each point to `p` doubles (`grad` writable).
 */
enum SngdStatus sngd_objective_grad(const struct SngdObjective *o,
                                    const double *w,
                                    size_t p,
                                    double *grad);

/**
 * Hessian-vector product `∇²ℓ(w) v` written to `out` (`p` entries).
 *
 * # Safety
 * `w`, `v` and `out` must each point to `p` doubles (`out` writable).
 */
enum SngdStatus sngd_objective_hvp(const struct SngdObjective *o,
                                   const double *w,
                                   const double *v,
                                   size_t p,
                                   double *out);

/**
 * Creates the state `N(μ, (BBᵀ)⁻¹)` with step size `beta` and entropy
 * weight `gamma`. The factor is copied; the caller keeps ownership.
 *
 * # Safety
 * `mu` must point to `p` doubles, `factor` must be live, `out` writable.
 */
enum SngdStatus sngd_gauss_new(const double *mu,
                               size_t p,
                               const struct SngdFactor *factor,
                               double beta,
                               double gamma,
                               struct SngdGauss **out);

/**
 * Releases a Gaussian state. Null is ignored.
 *
 * # Safety
 * `g` must come from this library and must not be used afterwards.
 */
void sngd_gauss_free(struct SngdGauss *g);

/**
 * Advances the state by one step in place. `samples` and `seed` are used
 * by the Monte-Carlo methods only. On failure the state is unchanged.
 *
 * # Safety
 * `g` and `o` must be live handles.
 */
enum SngdStatus sngd_gauss_step(struct SngdGauss *g,
                                const struct SngdObjective *o,
                                enum SngdGaussMethod method,
                                size_t samples,
                                uint64_t seed);

/**
 * Dimension of the state (0 for a null handle).
 *
 * # Safety
 * `g` must be null or a live handle.
 */
size_t sngd_gauss_dim(const struct SngdGauss *g);

/**
 * Writes the mean `μ` (`p` entries).
 *
 * # Safety
 * `out` must point to `len` writable doubles.
 */
enum SngdStatus sngd_gauss_mean(const struct SngdGauss *g, double *out, size_t len);

/**
 * Writes the precision `S = BBᵀ` (row-major, `p * p` entries).
 *
 * # Safety
 * `out` must point to `len` writable doubles.
 */
enum SngdStatus sngd_gauss_precision(const struct SngdGauss *g, double *out, size_t len);

/**
 * Serializes the state as JSON; release the string with
 * [`sngd_string_free`].
 *
 * # Safety
 * `g` must be live and `out` writable.
 */
enum SngdStatus sngd_gauss_to_json(const struct SngdGauss *g, char **out);

/**
 * Restores a state from [`sngd_gauss_to_json`] output.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` writable.
 */
enum SngdStatus sngd_gauss_from_json(const char *json, struct SngdGauss **out);

/**
 * Creates an Adam state at `w0` with learning rate `lr` (β₁ = 0.9,
 * β₂ = 0.999, ε = 1e-8).
 *
 * # Safety
 * `w0` must point to `p` doubles and `out` must be writable.
 */
enum SngdStatus sngd_adam_new(const double *w0, size_t p, double lr, struct SngdAdam **out);

/**
 * Releases an Adam state. Null is ignored.
 *
 * # Safety
 * `a` must come from this library and must not be used afterwards.
 */
void sngd_adam_free(struct SngdAdam *a);

/**
 * One Adam step on the objective's gradient, in place.
 *
 * # Safety
 * `a` and `o` must be live handles.
 */
enum SngdStatus sngd_adam_step(struct SngdAdam *a, const struct SngdObjective *o);

/**
 * Writes the current parameters (`p` entries).
 *
 * # Safety
 * `out` must point to `len` writable doubles.
 */
enum SngdStatus sngd_adam_params(const struct SngdAdam *a, double *out, size_t len);

/**
 * Executes a JSON run configuration (the format read by `sngd bench`) and
 * writes the loss after each iteration to `losses`. `capacity` must be at
 * least the configured iteration count; `written` receives the number of
 * losses written (also on a numerical failure, which reports the iterations
 * completed before it).
 *
 * # Safety
 * `config_json` must be NUL-terminated, `losses` must point to `capacity`
 * writable doubles and `written` must be writable.
 */
enum SngdStatus sngd_run(const char *config_json,
                         uint64_t seed,
                         double *losses,
                         size_t capacity,
                         size_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SNGD_H */

#ifndef KLDIFF_H
#define KLDIFF_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum KldiffStatus {
  KLDIFF_STATUS_OK = 0,
  KLDIFF_STATUS_NULL_POINTER = 1,
  KLDIFF_STATUS_INVALID_ARGUMENT = 2,
  KLDIFF_STATUS_CONFIG = 3,
  KLDIFF_STATUS_IO = 4,
  KLDIFF_STATUS_NUMERIC = 5,
  KLDIFF_STATUS_FORMAT = 6,
  KLDIFF_STATUS_PANIC = 7,
} KldiffStatus;

/**
 * Truncated KL basis on a fixed time grid.
 */
typedef struct KldiffBasis KldiffBasis;

/**
 * A loaded checkpoint.
 */
typedef struct KldiffModel KldiffModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *kldiff_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *kldiff_version(void);

/**
 * `φ_m(t)` for `m ≥ 1`, `t ∈ [0, 1]`.
 *
 * # Safety
 * Pointer arguments must be NULL or valid for the documented sizes;
 * handles must be live.
 */
enum KldiffStatus kldiff_phi(size_t m, double t, double *out);

/**
 * Build a basis with `m_terms` terms on an `n_steps` grid of the linear
 * schedule `β(t) = beta0 + (beta1 - beta0) t`.
 *
 * # Safety
 * Pointer arguments must be NULL or valid for the documented sizes;
 * handles must be live.
 */
enum KldiffStatus kldiff_basis_new(double beta0,
                                   double beta1,
                                   size_t n_steps,
                                   size_t m_terms,
                                   struct KldiffBasis **out);

/**
 * Release a basis. NULL is ignored.
 *
 * # Safety
 * `basis` must come from [`kldiff_basis_new`] and not have been freed.
 */
void kldiff_basis_free(struct KldiffBasis *basis);

/**
 * # Safety
 * Pointer arguments must be NULL or valid for the documented sizes;
 * handles must be live.
 */
enum KldiffStatus kldiff_basis_m_terms(const struct KldiffBasis *basis, size_t *out);

/**
 * Cached response `h_m(t_k)` on the grid.
 *
 * # Safety
 * Pointer arguments must be NULL or valid for the documented sizes;
 * handles must be live.
 */
enum KldiffStatus kldiff_basis_h(const struct KldiffBasis *basis, size_t m, size_t k, double *out);

/**
 * `h_m(t)` at an arbitrary time, for any `m ≥ 1`.
 *
 * # Safety
 * Pointer arguments must be NULL or valid for the documented sizes;
 * handles must be live.
 */
enum KldiffStatus kldiff_basis_h_at_time(const struct KldiffBasis *basis,
                                         size_t m,
                                         double t,
                                         double *out);

/**
 * Load a checkpoint from a NUL-terminated UTF-8 path.
 *
 * # Safety
 * `path` must be NULL or a valid NUL-terminated string.
 */
enum KldiffStatus kldiff_model_load(const char *path, struct KldiffModel **out);

/**
 * Release a model. NULL is ignored.
 *
 * # Safety
 * `model` must come from [`kldiff_model_load`] and not have been freed.
 */
void kldiff_model_free(struct KldiffModel *model);

/**
 * # Safety
 * Pointer arguments must be NULL or valid for the documented sizes;
 * handles must be live.
 */
enum KldiffStatus kldiff_model_data_dim(const struct KldiffModel *model, size_t *out);

/**
 * Draw `n` samples with DDIM over `steps` grid points into `out`, which
 * must hold `n * data_dim` doubles (row-major). The predictor follows the
 * checkpoint's training loss.
 *
 * # Safety
 * Pointer arguments must be NULL or valid for the documented sizes;
 * handles must be live.
 */
enum KldiffStatus kldiff_model_sample(const struct KldiffModel *model,
                                      size_t n,
                                      size_t steps,
                                      double eta,
                                      uint64_t seed,
                                      double *out,
                                      size_t out_len);

/**
 * Sample from the analytic predictor for standard-normal data.
 *
 * # Safety
 * Pointer arguments must be NULL or valid for the documented sizes;
 * handles must be live.
 */
enum KldiffStatus kldiff_oracle_sample(size_t n_steps,
                                       size_t n,
                                       size_t dim,
                                       size_t steps,
                                       double eta,
                                       uint64_t seed,
                                       double *out,
                                       size_t out_len);

/**
 * Energy distance between two row-major sample sets of width `dim`.
 *
 * # Safety
 * Pointer arguments must be NULL or valid for the documented sizes;
 * handles must be live.
 */
enum KldiffStatus kldiff_energy_distance(const double *a,
                                         size_t a_rows,
                                         const double *b,
                                         size_t b_rows,
                                         size_t dim,
                                         double *out);

/**
 * Sliced Wasserstein-1 distance and its standard error over projections.
 * `out_se` may be NULL.
 *
 * # Safety
 * Pointer arguments must be NULL or valid for the documented sizes;
 * handles must be live.
 */
enum KldiffStatus kldiff_sliced_wasserstein(const double *a,
                                            size_t a_rows,
                                            const double *b,
                                            size_t b_rows,
                                            size_t dim,
                                            size_t n_projections,
                                            uint64_t seed,
                                            double *out,
                                            double *out_se);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KLDIFF_H */

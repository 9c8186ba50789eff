#ifndef SENSEALIGN_H
#define SENSEALIGN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes shared by every entry point.
 */
typedef enum SaStatus {
  SA_STATUS_OK = 0,
  SA_STATUS_NULL_POINTER = 1,
  SA_STATUS_INVALID_ARGUMENT = 2,
  SA_STATUS_IO = 3,
  SA_STATUS_FORMAT = 4,
  SA_STATUS_NOT_FOUND = 5,
  SA_STATUS_SHAPE = 6,
  SA_STATUS_NUMERICAL = 7,
  SA_STATUS_PANIC = 8,
} SaStatus;

/**
 * Values accepted by the `solver` argument of [`sa_fit_projection`].
 */
enum SaSolver
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : uint32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  SA_SOLVER_LEAST_SQUARES = 0,
  SA_SOLVER_ORTHOGONAL = 1,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum SaSolver SaSolver;
#else
typedef uint32_t SaSolver;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

/**
 * Opaque model handle.
 */
typedef struct SaModel SaModel;

/**
 * Model dimensions.
 */
typedef struct SaDims {
  uint32_t vocab_size;
  uint32_t embed_dim;
  uint32_t hidden_dim;
  uint32_t num_senses;
  uint32_t proj_dim;
} SaDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next call into this library on the same thread.
 */
const char *sa_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sa_version(void);

/**
 * Loads a checkpoint file into a new handle stored in `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SaStatus sa_model_load(const char *path, struct SaModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`sa_model_load`] and not be freed twice.
 */
void sa_model_free(struct SaModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum SaStatus sa_model_dims(const struct SaModel *model, struct SaDims *out);

/**
 * Looks up the id of `token` in language `lang`.
 *
 * # Safety
 * `model` must be a live handle, `token` and `lang` NUL-terminated strings
 * and `out` a valid pointer.
 */
enum SaStatus sa_token_id(const struct SaModel *model,
                          const char *token,
                          const char *lang,
                          uint32_t *out);

/**
 * Final-layer representations of a token sequence, written row-major into
 * `out` (`len * hidden_dim` values).
 *
 * # Safety
 * `ids` must hold `len` ids and `out` must hold `out_len` doubles.
 */
enum SaStatus sa_encode(const struct SaModel *model,
                        const uint32_t *ids,
                        size_t len,
                        double *out,
                        size_t out_len);

/**
 * Active sense of `token` whose projected center is closest in cosine to the
 * projected representation `h` (`len` must equal the hidden width).
 *
 * # Safety
 * `h` must hold `len` doubles and `out` be a valid pointer.
 */
enum SaStatus sa_nearest_sense(const struct SaModel *model,
                               uint32_t token,
                               const double *h,
                               size_t len,
                               uint32_t *out);

/**
 * Cosine similarity of two vectors; 0 when either has zero norm.
 *
 * # Safety
 * `a` and `b` must hold `len` doubles and `out` be a valid pointer.
 */
enum SaStatus sa_cosine(const double *a, const double *b, size_t len, double *out);

/**
 * Fits `W` (`dim x dim`, row-major into `w_out`) with the [`SaSolver`]
 * `solver`, minimizing `sum_i |W src_i - tgt_i|^2` over `n` row pairs. A negative `ridge` selects
 * the default; the orthogonal solver ignores it. `residuals` receives the
 * identity and fitted residuals and may be null.
 *
 * # Safety
 * `src` and `tgt` must hold `n * dim` doubles, `w_out` `dim * dim` doubles,
 * and `residuals`, when not null, two doubles.
 */
enum SaStatus sa_fit_projection(const double *src,
                                const double *tgt,
                                size_t n,
                                size_t dim,
                                uint32_t solver,
                                double ridge,
                                double *w_out,
                                double *residuals);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SENSEALIGN_H */

#ifndef GUIDANCE_LAB_H
#define GUIDANCE_LAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

enum GlStatus
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  GL_STATUS_OK = 0,
  GL_STATUS_NULL_POINTER = -1,
  GL_STATUS_INVALID_ARGUMENT = -2,
  GL_STATUS_MISSING_ARTIFACT = -3,
  GL_STATUS_NUMERICAL = -4,
  GL_STATUS_INVALID_UTF8 = -5,
  GL_STATUS_BUFFER_TOO_SMALL = -6,
  GL_STATUS_PANIC = -7,
  GL_STATUS_INTERNAL = -8,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum GlStatus GlStatus;
#else
typedef int32_t GlStatus;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

/**
 * Score backend plus its sampling schedule.
 */
typedef struct GlModel GlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Analytic mixture backend from a preset name (`ring`, `two-blobs`,
 * `gaussian`). `schedule` may be NULL for the cosine schedule.
 *
 * # Safety
 * String arguments must be NUL-terminated or NULL.
 */
struct GlModel *gl_model_new_preset(const char *preset, const char *schedule, size_t steps);

/**
 * Analytic mixture backend from a JSON mixture spec.
 *
 * # Safety
 * String arguments must be NUL-terminated or NULL.
 */
struct GlModel *gl_model_new_analytic(const char *spec_json, const char *schedule, size_t steps);

/**
 * MLP backend from a checkpoint file written by `guidance-lab train`.
 *
 * # Safety
 * String arguments must be NUL-terminated or NULL.
 */
struct GlModel *gl_model_load_mlp(const char *path, const char *schedule, size_t steps);

/**
 * # Safety
 * `model` must come from a constructor above and not be used afterwards.
 */
void gl_model_free(struct GlModel *model);

/**
 * Latent dimension, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t gl_model_dim(const struct GlModel *model);

/**
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t gl_model_num_classes(const struct GlModel *model);

/**
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t gl_model_steps(const struct GlModel *model);

/**
 * Full-CFG generation: writes x₀ (dim entries) and the NFE spent.
 *
 * # Safety
 * `out_x0` must hold `out_len` doubles; `out_nfe` may be NULL.
 */
GlStatus gl_generate_cfg(const struct GlModel *model,
                         uint64_t seed,
                         int64_t class_,
                         double s,
                         double *out_x0,
                         size_t out_len,
                         uint64_t *out_nfe);

/**
 * Adaptive Guidance: CFG until the branch cosine exceeds `gamma_bar`, then
 * conditional steps only. `gamma_bar` > 1 reproduces full CFG exactly.
 *
 * # Safety
 * As for `gl_generate_cfg`.
 */
GlStatus gl_generate_ag(const struct GlModel *model,
                        uint64_t seed,
                        int64_t class_,
                        double s,
                        double gamma_bar,
                        double *out_x0,
                        size_t out_len,
                        uint64_t *out_nfe);

/**
 * Replay a policy given as JSON, e.g. `["cfg:7.5","cond","cond"]` (T + 1 entries).
 *
 * # Safety
 * As for `gl_generate_cfg`; `policy_json` must be NUL-terminated.
 */
GlStatus gl_generate_policy(const struct GlModel *model,
                            const char *policy_json,
                            uint64_t seed,
                            int64_t class_,
                            double *out_x0,
                            size_t out_len,
                            uint64_t *out_nfe);

/**
 * Single-latent ε prediction at grid step t.
 *
 * # Safety
 * `x` and `out` must hold `len` doubles, `len` equal to the model dimension.
 */
GlStatus gl_eval_score(const struct GlModel *model,
                       const double *x,
                       size_t len,
                       size_t t,
                       int64_t class_,
                       double *out);

/**
 * out = ε_u + s (ε_c − ε_u).
 *
 * # Safety
 * All three buffers must hold `len` doubles.
 */
GlStatus gl_cfg_score(const double *eps_uncond,
                      const double *eps_cond,
                      size_t len,
                      double s,
                      double *out);

/**
 * Cosine similarity of two vectors; zero-norm input is an error.
 *
 * # Safety
 * `a` and `b` must hold `len` doubles; `out` must be writable.
 */
GlStatus gl_cosine_gamma(const double *a, const double *b, size_t len, double *out);

/**
 * NFE a policy spends on its T sampling steps, or a negative status.
 *
 * # Safety
 * `policy_json` must be NUL-terminated.
 */
int64_t gl_policy_nfe(const char *policy_json);

/**
 * Copy the last error message on this thread into `buf` (NUL-terminated,
 * truncated to fit). Returns the full message length excluding the NUL, so
 * a call with `buf_len` 0 sizes the buffer.
 *
 * # Safety
 * `buf` must hold `buf_len` bytes, or be NULL with `buf_len` 0.
 */
size_t gl_last_error_message(char *buf, size_t buf_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GUIDANCE_LAB_H */

#ifndef MOEFIELD_H
#define MOEFIELD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum MfStatus {
  MF_STATUS_OK = 0,
  MF_STATUS_NULL_POINTER = 1,
  MF_STATUS_INVALID_ARGUMENT = 2,
  MF_STATUS_SHAPE = 3,
  MF_STATUS_FORMAT = 4,
  MF_STATUS_NON_FINITE = 5,
  MF_STATUS_CONFIG = 6,
  MF_STATUS_IO = 7,
  MF_STATUS_PANIC = 8,
} MfStatus;

// A trained mixture loaded from a checkpoint directory.
typedef struct MfModel MfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread; empty when none. The pointer
// stays valid until the next failing call on this thread.
const char *mf_last_error(void);

// Library version as a static nul-terminated string.
const char *mf_version(void);

// Loads the checkpoint directory at `path` into `*out`.
//
// # Safety
// `path` must be a nul-terminated string and `out` writable.
enum MfStatus mf_model_load(const char *path, struct MfModel **out);

// Releases a model; null is ignored.
//
// # Safety
// `model` must come from [`mf_model_load`] and not be used afterwards.
void mf_model_free(struct MfModel *model);

// Writes the expert count M and top-k of the mixture.
//
// # Safety
// `model` must be a live handle; `experts` and `k` writable.
enum MfStatus mf_model_info(const struct MfModel *model, size_t *experts, size_t *k);

// Mixture density and color at point `x[3]` seen from unit direction `d[3]`.
// Points rejected by the density filter report zero density and black.
// `probs` receives M gate probabilities when non-null.
//
// # Safety
// `model` must be a live handle; `x`, `d`, `rgb` hold 3 values, `sigma` one,
// and `probs`, when non-null, M.
enum MfStatus mf_model_query(const struct MfModel *model,
                             const double *x,
                             const double *d,
                             float *sigma,
                             float *rgb,
                             float *probs);

// Renders a `width x height` image from the camera-to-world `pose[16]`
// (row-major, looking down local -z) into `rgb`, row-major RGB triples.
// `samples` = 0 uses the checkpoint's sample count.
//
// # Safety
// `model` must be a live handle, `pose` hold 16 values and `rgb`
// `3 * width * height`.
enum MfStatus mf_model_render(const struct MfModel *model,
                              const double *pose,
                              double focal,
                              size_t width,
                              size_t height,
                              size_t samples,
                              float *rgb);

// Ground-truth render of a built-in scene, same layout as [`mf_model_render`].
//
// # Safety
// `scene` must be a nul-terminated string, `pose` hold 16 values and `rgb`
// `3 * width * height`.
enum MfStatus mf_scene_render(const char *scene,
                              const double *pose,
                              double focal,
                              size_t width,
                              size_t height,
                              float *rgb);

// PSNR and SSIM of two `width x height` RGB images with values in [0, 1].
//
// # Safety
// `a` and `b` hold `3 * width * height` values; `psnr` and `ssim` writable.
enum MfStatus mf_image_metrics(const float *a,
                               const float *b,
                               size_t width,
                               size_t height,
                               double *psnr,
                               double *ssim);

// Weight `alpha` in `alpha y1 + (1 - alpha) y2`, within [0, 1], that
// minimizes the mean squared error against `target`.
//
// # Safety
// `y1`, `y2` and `target` hold `len` values; `alpha` writable.
enum MfStatus mf_ensemble_optimal_alpha(const double *y1,
                                        const double *y2,
                                        const double *target,
                                        size_t len,
                                        double *alpha);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOEFIELD_H */

#ifndef MDIR_H
#define MDIR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum MdirStatus {
  MDIR_STATUS_OK = 0,
  MDIR_STATUS_NULL_POINTER = 1,
  MDIR_STATUS_INVALID_ARGUMENT = 2,
  MDIR_STATUS_IO = 3,
  MDIR_STATUS_NUMERIC = 4,
  MDIR_STATUS_PANIC = 5,
} MdirStatus;

// Degradation categories, in dataset generation order.
typedef enum MdirCategory {
  MDIR_CATEGORY_RAIN = 0,
  MDIR_CATEGORY_SNOW = 1,
  MDIR_CATEGORY_HAZE = 2,
  MDIR_CATEGORY_NOISE = 3,
  MDIR_CATEGORY_RAIN_HAZE = 4,
  MDIR_CATEGORY_HAZE_NOISE = 5,
  MDIR_CATEGORY_RAIN_HAZE_NOISE = 6,
} MdirCategory;

// A restoration network with its weights.
typedef struct MdirModel MdirModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *mdir_version(void);

// Message for the last failed call on this thread, or null after a
// success. Valid until the next call on the same thread.
const char *mdir_last_error(void);

// Number of degradation labels reported by [`mdir_model_classify`].
size_t mdir_num_labels(void);

// Loads a restoration checkpoint into a new handle stored in `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum MdirStatus mdir_model_load(const char *path, struct MdirModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must come from [`mdir_model_load`] and not be used afterwards.
void mdir_model_free(struct MdirModel *model);

// Restores one image. Both sides must be divisible by 4. `output` receives
// `3 * height * width` floats clipped to `[0, 1]`.
//
// # Safety
// Buffers must hold `3 * height * width` floats; `model` must be live.
enum MdirStatus mdir_model_restore(const struct MdirModel *model,
                                   const float *input,
                                   size_t height,
                                   size_t width,
                                   float *output);

// Degradation probabilities (rain, snow, haze, noise) from the model's
// classifier. Fails for models trained without condition embedding.
//
// # Safety
// `input` must hold `3 * height * width` floats and `probs` 4 floats.
enum MdirStatus mdir_model_classify(const struct MdirModel *model,
                                    const float *input,
                                    size_t height,
                                    size_t width,
                                    float *probs);

// PSNR of `a` against `b` over a data range of 1. Identical images give
// positive infinity.
//
// # Safety
// Both buffers must hold `3 * height * width` floats.
enum MdirStatus mdir_psnr(const float *a, const float *b, size_t height, size_t width, double *out);

// Mean SSIM of `a` against `b` on the luminance channel.
//
// # Safety
// Both buffers must hold `3 * height * width` floats.
enum MdirStatus mdir_ssim(const float *a, const float *b, size_t height, size_t width, double *out);

// Applies a seeded degradation of `category` (an [`MdirCategory`] value)
// to a clean image, exactly as the dataset generator does for that seed.
//
// # Safety
// `clean` and `out` must hold `3 * height * width` floats.
enum MdirStatus mdir_degrade(const float *clean,
                             size_t height,
                             size_t width,
                             uint32_t category,
                             uint64_t seed,
                             float *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MDIR_H */

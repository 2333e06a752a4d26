#ifndef HEMOSCAN_H
#define HEMOSCAN_H

/* Generated by cbindgen from hemoscan-capi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of a fallible call.
 */
typedef enum {
  /*
   Success.
   */
  HS_OK = 0,
  /*
   A null pointer, undersized buffer, or otherwise unusable argument.
   */
  HS_INVALID_ARGUMENT = 1,
  /*
   The operating system rejected a file operation.
   */
  HS_IO = 2,
  /*
   A file exists but its bytes are not a valid artifact.
   */
  HS_FORMAT = 3,
  /*
   A configuration value is out of range or inconsistent.
   */
  HS_CONFIG = 4,
  /*
   An internal invariant failed; report this as a bug.
   */
  HS_INTERNAL = 5,
} HsStatus;

/*
 The three trained stages wired for inference; opaque to C.
 */
typedef struct HsPipeline HsPipeline;

/*
 An in-memory CT volume; opaque to C.
 */
typedef struct HsVolume HsVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 The message for the most recent failure on this thread, or an empty
 string. The pointer stays valid until the next failure on this thread.
 */
const char *hs_last_error(void);

/*
 The library version as a static NUL-terminated string.
 */
const char *hs_version(void);

/*
 Number of probability columns per slice (the `any` column plus five
 subtypes).
 */
size_t hs_num_classes(void);

/*
 Reads a `.ctv` volume from `path` into `*out`.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer; on
 `HsOk` the caller owns `*out` and must release it with
 [`hs_volume_free`].
 */
HsStatus hs_volume_open(const char *path, HsVolume **out);

/*
 Slice count of an open volume; 0 for a null handle.
 */
size_t hs_volume_n_slices(const HsVolume *volume);

/*
 Slice height in pixels; 0 for a null handle.
 */
size_t hs_volume_height(const HsVolume *volume);

/*
 Slice width in pixels; 0 for a null handle.
 */
size_t hs_volume_width(const HsVolume *volume);

/*
 Releases a volume handle. Null is a no-op.

 # Safety
 `volume` must be a pointer from [`hs_volume_open`] that has not been
 freed yet.
 */
void hs_volume_free(HsVolume *volume);

/*
 Loads encoder, selector, and scan-model checkpoints into `*out`.

 # Safety
 The three paths must be NUL-terminated strings and `out` a valid
 pointer; on `HsOk` the caller owns `*out` and must release it with
 [`hs_pipeline_free`].
 */
HsStatus hs_pipeline_open(const char *encoder_ckpt,
                          const char *selector_ckpt,
                          const char *lstm_ckpt,
                          HsPipeline **out);

/*
 Releases a pipeline handle. Null is a no-op.

 # Safety
 `pipeline` must be a pointer from [`hs_pipeline_open`] that has not
 been freed yet.
 */
void hs_pipeline_free(HsPipeline *pipeline);

/*
 Runs the pipeline over every slice of `volume`, writing
 `hs_volume_n_slices(volume) * hs_num_classes()` probabilities to
 `out_probs` in slice-major order. `capacity` is the length of
 `out_probs`; an undersized buffer fails without writing.

 # Safety
 `pipeline` and `volume` must be live handles and `out_probs` valid for
 `capacity` writes.
 */
HsStatus hs_pipeline_predict(const HsPipeline *pipeline,
                             const HsVolume *volume,
                             double *out_probs,
                             size_t capacity);

/*
 Applies an HU display window to one slice: `out[i] = clamp((hu[i] -
 center + width/2) / width, 0, 1)`. `hu` and `out` hold `height *
 width` values in row-major order.

 # Safety
 `hu` must be valid for `height * width` reads and `out` for the same
 number of writes.
 */
HsStatus hs_apply_window(const int16_t *hu,
                         size_t height,
                         size_t width,
                         double center,
                         double window_width,
                         double *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* HEMOSCAN_H */

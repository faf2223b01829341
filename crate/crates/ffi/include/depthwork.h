#ifndef DEPTHWORK_H
#define DEPTHWORK_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum DwStatus {
  DW_STATUS_OK = 0,
  DW_STATUS_NULL_POINTER = 1,
  DW_STATUS_INVALID_ARGUMENT = 2,
  DW_STATUS_IO = 3,
  DW_STATUS_NO_VALID_PIXELS = 4,
  DW_STATUS_DEGENERATE = 5,
  DW_STATUS_INTERNAL = 6,
} DwStatus;

/**
 * Depth map in meters, 0 marks an invalid pixel.
 */
typedef struct DwDepth DwDepth;

/**
 * Trained depth-completion model.
 */
typedef struct DwModel DwModel;

/**
 * TSDF volume.
 */
typedef struct DwTsdf DwTsdf;

/**
 * Errors over valid ground-truth pixels, meters.
 */
typedef struct DwMetrics {
  double rmse;
  double mae;
  double rel;
  uint64_t n_valid;
} DwMetrics;

/**
 * Pinhole intrinsics; `u` runs along columns, `v` along rows.
 */
typedef struct DwIntrinsics {
  double fx;
  double fy;
  double cx;
  double cy;
  uint32_t width;
  uint32_t height;
} DwIntrinsics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length.
 *
 * # Safety
 * `buf` must point to `len` writable bytes, or be NULL with `len` 0.
 */
size_t dw_last_error(char *buf, size_t len);

/**
 * Depth map from `width * height` row-major values in meters.
 *
 * # Safety
 * `data` must point to `width * height` doubles; `out` must be writable.
 */
enum DwStatus dw_depth_new(uint32_t width,
                           uint32_t height,
                           const double *data,
                           struct DwDepth **out);

/**
 * Reads a 16-bit millimeter PGM.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum DwStatus dw_depth_load_pgm(const char *path, struct DwDepth **out);

/**
 * # Safety
 * `d` must come from this library and not be used afterwards.
 */
void dw_depth_free(struct DwDepth *d);

/**
 * Width and height of `d`.
 *
 * # Safety
 * All pointers must be valid.
 */
enum DwStatus dw_depth_size(const struct DwDepth *d, uint32_t *width, uint32_t *height);

/**
 * Copies the row-major values of `d` into `out`, which holds `len` doubles.
 *
 * # Safety
 * `out` must point to `len` writable doubles.
 */
enum DwStatus dw_depth_copy(const struct DwDepth *d, double *out, size_t len);

/**
 * RMSE, MAE and relative error of `pred` over the valid pixels of `gt`.
 *
 * # Safety
 * All pointers must be valid.
 */
enum DwStatus dw_evaluate(const struct DwDepth *gt,
                          const struct DwDepth *pred,
                          struct DwMetrics *out);

/**
 * Rigid transform taking `model` points onto `measured` points (`n` xyz
 * triples each). Writes a row-major 4x4 matrix and the RMS residual.
 *
 * # Safety
 * `measured` and `model` must hold `3 n` doubles, `pose_out` 16,
 * `rms_out` one.
 */
enum DwStatus dw_fit_rigid(const double *measured,
                           const double *model,
                           size_t n,
                           double *pose_out,
                           double *rms_out);

/**
 * Empty volume with its minimum corner at `origin`. A `truncation` of 0
 * or less selects four voxels.
 *
 * # Safety
 * `origin` and `dims` must hold three values; `out` must be writable.
 */
enum DwStatus dw_tsdf_new(const double *origin,
                          const uint32_t *dims,
                          double voxel_size,
                          double truncation,
                          struct DwTsdf **out);

/**
 * Fuses one depth frame seen by a camera with the given intrinsics and
 * row-major 4x4 camera-from-world `pose`.
 *
 * # Safety
 * All pointers must be valid; `pose` must hold 16 doubles.
 */
enum DwStatus dw_tsdf_integrate(struct DwTsdf *v,
                                const struct DwDepth *depth,
                                const struct DwIntrinsics *k,
                                const double *pose);

/**
 * Depth of the fused surface as seen by the camera; unseen pixels are 0.
 *
 * # Safety
 * All pointers must be valid; `pose` must hold 16 doubles.
 */
enum DwStatus dw_tsdf_raycast(const struct DwTsdf *v,
                              const struct DwIntrinsics *k,
                              const double *pose,
                              struct DwDepth **out);

/**
 * # Safety
 * `v` must come from this library and not be used afterwards.
 */
void dw_tsdf_free(struct DwTsdf *v);

/**
 * Loads a weight file; the architecture comes from the file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum DwStatus dw_model_load(const char *path, struct DwModel **out);

/**
 * Completes `raw` given the color image `rgb` (interleaved, row-major,
 * values in [0, 1], same size as `raw`). Pixels of `raw` that are 0 are
 * treated as holes.
 *
 * # Safety
 * `rgb` must hold `3 * width * height` doubles; other pointers must be valid.
 */
enum DwStatus dw_model_predict(const struct DwModel *m,
                               const double *rgb,
                               const struct DwDepth *raw,
                               struct DwDepth **out);

/**
 * # Safety
 * `m` must come from this library and not be used afterwards.
 */
void dw_model_free(struct DwModel *m);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEPTHWORK_H */

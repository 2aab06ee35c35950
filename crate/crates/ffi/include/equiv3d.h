#ifndef EQUIV3D_H
#define EQUIV3D_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every entry point.
typedef enum Eq3dStatus {
  EQ3D_STATUS_OK = 0,
  EQ3D_STATUS_NULL_ARGUMENT = 1,
  EQ3D_STATUS_INVALID_ARGUMENT = 2,
  EQ3D_STATUS_FORMAT = 3,
  EQ3D_STATUS_IO = 4,
  EQ3D_STATUS_DEGENERATE_FEATURE = 5,
  EQ3D_STATUS_NO_CANDIDATES = 6,
  EQ3D_STATUS_INSUFFICIENT_CORRESPONDENCES = 7,
  EQ3D_STATUS_PANIC = 99,
} Eq3dStatus;

// Opaque feature map.
typedef struct Eq3dFeatureMap Eq3dFeatureMap;

// Opaque convolution head.
typedef struct Eq3dHead Eq3dHead;

// Camera intrinsics for [`eq3d_pnp_ransac`].
typedef struct Eq3dIntrinsics {
  double fx;
  double fy;
  double cx;
  double cy;
  uint32_t width;
  uint32_t height;
} Eq3dIntrinsics;

// RANSAC settings for [`eq3d_pnp_ransac`]. The threshold is in pixels of
// the image being solved.
typedef struct Eq3dRansacConfig {
  uint32_t iterations;
  double inlier_threshold;
  uint64_t seed;
  bool refine;
} Eq3dRansacConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failure on this thread; empty after a success. The
// pointer stays valid until the next call on the same thread.
const char *eq3d_last_error(void);

// Library version as a static NUL-terminated string.
const char *eq3d_version(void);

// Load an FTB1 file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be valid for writes.
enum Eq3dStatus eq3d_feature_map_load(const char *path, struct Eq3dFeatureMap **out);

// Build a feature map from `len` floats laid out `[row][col][channel]` on
// the `ceil(h / patch) x ceil(w / patch)` grid.
//
// # Safety
// `data` must point to `len` floats; `out` must be valid for writes.
enum Eq3dStatus eq3d_feature_map_new(uint32_t channels,
                                     uint32_t patch,
                                     uint32_t img_w,
                                     uint32_t img_h,
                                     const float *data,
                                     uintptr_t len,
                                     struct Eq3dFeatureMap **out);

// Release a feature map. Null is ignored.
//
// # Safety
// `m` must come from this library and not be used afterwards.
void eq3d_feature_map_free(struct Eq3dFeatureMap *m);

// Grid and image dimensions: `dims = [hf, wf, channels, patch, img_w, img_h]`.
//
// # Safety
// `m` must be a live handle; `dims` must hold 6 values.
enum Eq3dStatus eq3d_feature_map_dims(const struct Eq3dFeatureMap *m, uint32_t *dims);

// Bilinear feature at image coordinates `(x, y)`, optionally L2-normalized.
// `out` receives `channels` values.
//
// # Safety
// `m` must be a live handle; `out` must hold `out_len` doubles.
enum Eq3dStatus eq3d_sample_feature(const struct Eq3dFeatureMap *m,
                                    double x,
                                    double y,
                                    bool normalize,
                                    double *out,
                                    uintptr_t out_len);

// Nearest neighbor of `query` (normalized here) among the pixel centers of
// `target` on a stride grid. Writes the matched position and its cosine.
//
// # Safety
// `target` must be a live handle; `query` must hold `len` doubles; the
// out-pointers must be valid for writes.
enum Eq3dStatus eq3d_best_match(const struct Eq3dFeatureMap *target,
                                const double *query,
                                uintptr_t len,
                                uint32_t stride,
                                double *out_x,
                                double *out_y,
                                double *out_score);

// APE (percent of `min(img_w, img_h)`) and PCDP at `delta` for `n` pairs of
// ground-truth and predicted target positions, each given as `x, y`.
//
// # Safety
// `gt` and `pred` must hold `2 n` doubles; out-pointers valid for writes.
enum Eq3dStatus eq3d_ape_pcdp(const double *gt,
                              const double *pred,
                              uintptr_t n,
                              uint32_t img_w,
                              uint32_t img_h,
                              double delta,
                              double *out_ape,
                              double *out_pcdp);

// `1 - SmoothAP` for one query against `n_pos` positives and `n_neg`
// negatives, all `dim`-dimensional and row-major. Gradient buffers are
// optional (null skips them) and, when given, have the shapes of their
// inputs.
//
// # Safety
// Input pointers must hold the stated number of doubles; non-null gradient
// and loss pointers must be valid for writes of the same sizes.
enum Eq3dStatus eq3d_smooth_ap_loss(const double *query,
                                    const double *positives,
                                    uintptr_t n_pos,
                                    const double *negatives,
                                    uintptr_t n_neg,
                                    uintptr_t dim,
                                    double tau,
                                    bool include_self_term,
                                    double *out_loss,
                                    double *d_query,
                                    double *d_positives,
                                    double *d_negatives);

// Robust pose from `n` pixel/point pairs (`pixels` as `x, y`, `points` as
// `x, y, z`). Writes the world-to-camera rotation (row-major 3x3), the
// translation and the inlier count.
//
// # Safety
// `pixels` holds `2 n` doubles, `points` `3 n`; `rotation` has room for 9,
// `translation` for 3; `inliers` valid for writes.
enum Eq3dStatus eq3d_pnp_ransac(const double *pixels,
                                const double *points,
                                uintptr_t n,
                                const struct Eq3dIntrinsics *k,
                                const struct Eq3dRansacConfig *cfg,
                                double *rotation,
                                double *translation,
                                uintptr_t *inliers);

// Load an HED1 checkpoint.
//
// # Safety
// `path` must be NUL-terminated; `out` valid for writes.
enum Eq3dStatus eq3d_head_load(const char *path, struct Eq3dHead **out);

// Zero-initialized residual head with `layers` conv layers: the identity.
//
// # Safety
// `out` must be valid for writes.
enum Eq3dStatus eq3d_head_zero_init(uint32_t channels, uint32_t layers, struct Eq3dHead **out);

// Release a head. Null is ignored.
//
// # Safety
// `h` must come from this library and not be used afterwards.
void eq3d_head_free(struct Eq3dHead *h);

// Run the head over a feature map, producing a new map handle.
//
// # Safety
// `h` and `m` must be live handles; `out` valid for writes.
enum Eq3dStatus eq3d_head_apply(const struct Eq3dHead *h,
                                const struct Eq3dFeatureMap *m,
                                struct Eq3dFeatureMap **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EQUIV3D_H */

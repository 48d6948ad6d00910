#ifndef MSTH_H
#define MSTH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum MsthStatus {
  MSTH_STATUS_OK = 0,
  MSTH_STATUS_NULL_ARGUMENT = 1,
  MSTH_STATUS_INVALID_ARGUMENT = 2,
  MSTH_STATUS_CONFIG = 3,
  MSTH_STATUS_IO = 4,
  MSTH_STATUS_MISSING_FILE = 5,
  MSTH_STATUS_FORMAT = 6,
  MSTH_STATUS_DATASET = 7,
  MSTH_STATUS_NON_FINITE = 8,
  MSTH_STATUS_BUFFER_TOO_SMALL = 9,
  MSTH_STATUS_PANIC = 10,
} MsthStatus;

typedef enum MsthPreset {
  MSTH_PRESET_ORBIT = 0,
  MSTH_PRESET_STATIC = 1,
  MSTH_PRESET_MOVING_BOX = 2,
} MsthPreset;

/**
 * A loaded dataset.
 */
typedef struct MsthDataset MsthDataset;

/**
 * A trained model (checkpoint).
 */
typedef struct MsthModel MsthModel;

typedef struct MsthModelInfo {
  /**
   * 0 masked, 1 additive, 2 pure 4D.
   */
  uint32_t mode;
  uint64_t step;
  uint32_t n_samples;
  double bounds_min[3];
  double bounds_max[3];
  /**
   * Default incremental-rendering threshold from the training config.
   */
  double epsilon;
} MsthModelInfo;

/**
 * Pinhole camera; `pose` is camera-to-world, row-major 3×4, with +z
 * forward and +y down in camera space.
 */
typedef struct MsthCamera {
  uint32_t width;
  uint32_t height;
  double fx;
  double fy;
  double cx;
  double cy;
  double pose[12];
  double near;
  double far;
} MsthCamera;

typedef struct MsthIncrementalStats {
  uint64_t dynamic_pixels;
  uint64_t rendered_pixels;
  uint64_t total_pixels;
  double speedup;
} MsthIncrementalStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *msth_version(void);

/**
 * Message describing the calling thread's most recent failure (empty after
 * a success). Valid until the next call on this thread.
 */
const char *msth_last_error(void);

/**
 * Loads a checkpoint written by `msth train`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum MsthStatus msth_model_load(const char *path, struct MsthModel **out);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards. Null is ignored.
 */
void msth_model_free(struct MsthModel *model);

/**
 * # Safety
 * `model` must be a live handle and `path` a valid string.
 */
enum MsthStatus msth_model_save(const struct MsthModel *model, const char *path);

/**
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum MsthStatus msth_model_info(const struct MsthModel *model, struct MsthModelInfo *out);

/**
 * Field value at world point `x`, unit direction `dir` and normalized time
 * `t`. `mask` receives the static weight `m(x)` (0 for models without a mask).
 *
 * # Safety
 * Pointers must be valid; `x`, `dir` and `rgb` point to 3 doubles.
 */
enum MsthStatus msth_model_query(const struct MsthModel *model,
                                 const double *x,
                                 const double *dir,
                                 double t,
                                 double *sigma,
                                 double *rgb,
                                 double *mask);

/**
 * Renders one RGB frame (row-major, 3 floats per pixel) into `out`, which
 * must hold at least `width·height·3` floats.
 *
 * # Safety
 * `model` and `camera` must be valid; `out` must point to `out_len` floats.
 */
enum MsthStatus msth_render(const struct MsthModel *model,
                            const struct MsthCamera *camera,
                            double t,
                            float *out,
                            size_t out_len);

/**
 * Renders `n_times` frames, reusing frame 0 for pixels classified static
 * at point threshold `epsilon`; the ray threshold is the checkpoint's
 * `ray_threshold`. `out` receives the frames back to back.
 *
 * # Safety
 * Pointers must be valid; `times` points to `n_times` doubles, `out` to
 * `out_len` floats; `stats` may be null.
 */
enum MsthStatus msth_render_incremental(const struct MsthModel *model,
                                        const struct MsthCamera *camera,
                                        const double *times,
                                        size_t n_times,
                                        double epsilon,
                                        float *out,
                                        size_t out_len,
                                        struct MsthIncrementalStats *stats);

/**
 * Loads a dataset directory containing `scene.json`.
 *
 * # Safety
 * `dir` must be a valid string and `out` a valid pointer.
 */
enum MsthStatus msth_dataset_load(const char *dir, struct MsthDataset **out);

/**
 * # Safety
 * `data` must come from this library and not be used afterwards. Null is ignored.
 */
void msth_dataset_free(struct MsthDataset *data);

/**
 * Number of cameras and frames.
 *
 * # Safety
 * All pointers must be valid.
 */
enum MsthStatus msth_dataset_info(const struct MsthDataset *data, size_t *cameras, size_t *frames);

/**
 * Camera `index` of the dataset.
 *
 * # Safety
 * All pointers must be valid.
 */
enum MsthStatus msth_dataset_camera(const struct MsthDataset *data,
                                    size_t index,
                                    struct MsthCamera *out);

/**
 * Normalized time of frame `frame`.
 *
 * # Safety
 * All pointers must be valid.
 */
enum MsthStatus msth_dataset_time(const struct MsthDataset *data, size_t frame, double *t);

/**
 * Writes a procedural dataset to `out_dir`.
 *
 * # Safety
 * `out_dir` must be a valid string.
 */
enum MsthStatus msth_synth(const char *out_dir,
                           enum MsthPreset preset,
                           uint32_t width,
                           uint32_t height,
                           uint32_t frames,
                           uint32_t oracle_samples,
                           uint64_t seed);

/**
 * Trains from scratch with the CPU-sized preset. `overrides` is null or a
 * `;`-separated list of `key=value` pairs. When `out_dir` is non-null the
 * training log and checkpoint are written there.
 *
 * # Safety
 * String arguments must be valid or null where allowed; `out` must be valid.
 */
enum MsthStatus msth_train(const char *data_dir,
                           const char *out_dir,
                           const char *overrides,
                           struct MsthModel **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MSTH_H */

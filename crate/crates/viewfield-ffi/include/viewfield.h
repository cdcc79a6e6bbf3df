#ifndef VIEWFIELD_H
#define VIEWFIELD_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum {
  VF_STATUS_VF_OK = 0,
  /**
   * A required pointer argument was null.
   */
  VF_STATUS_VF_NULL_ARGUMENT = 1,
  /**
   * Arguments were malformed (bad UTF-8, bad value, bad config).
   */
  VF_STATUS_VF_INVALID_ARGUMENT = 2,
  /**
   * Filesystem or stream I/O failed.
   */
  VF_STATUS_VF_IO = 3,
  /**
   * The operation itself failed; see vf_last_error.
   */
  VF_STATUS_VF_RUNTIME = 4,
} VfStatus;

/**
 * Opaque trained-map handle (a loaded atlas checkpoint).
 */
typedef struct VfAtlas VfAtlas;

/**
 * Opaque run configuration handle.
 */
typedef struct VfConfig VfConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message into `buf` (truncated, always
 * nul-terminated). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must point to `cap` writable bytes, or be null (query length).
 */
uintptr_t vf_last_error(char *buf, uintptr_t cap);

/**
 * Library version as a static string.
 */
const char *vf_version(void);

/**
 * New configuration with library defaults. Free with vf_config_free.
 */
VfConfig *vf_config_default(void);

/**
 * Load a configuration from a TOML file; returns null on failure.
 *
 * # Safety
 * `path` must be a valid nul-terminated string.
 */
VfConfig *vf_config_from_toml_file(const char *path);

/**
 * Set a string field: "stream", "out", or "mode"
 * ("view_centric" | "world_centric_single").
 *
 * # Safety
 * `cfg` must be a live handle; `key` and `value` valid nul-terminated
 * strings.
 */
VfStatus vf_config_set_str(VfConfig *cfg, const char *key, const char *value);

/**
 * Set a numeric field: "seed", "train_steps_per_keyframe",
 * "eval_interval", "rgb_only" (0/1), or "rescale" (0/1).
 *
 * # Safety
 * `cfg` must be a live handle; `key` a valid nul-terminated string.
 */
VfStatus vf_config_set_u64(VfConfig *cfg, const char *key, uint64_t value);

/**
 * # Safety
 * `cfg` must come from this library and not be freed twice.
 */
void vf_config_free(VfConfig *cfg);

/**
 * Run the full mapping pipeline described by `cfg` (stream in, artifacts
 * out).
 *
 * # Safety
 * `cfg` must be a live handle.
 */
VfStatus vf_run(const VfConfig *cfg);

/**
 * Generate a synthetic tracker stream. `loop_close_at < 0` disables the
 * loop-closure event.
 *
 * # Safety
 * `out_dir` must be a valid nul-terminated string.
 */
VfStatus vf_gen_stream(const char *out_dir,
                       uintptr_t frames,
                       uint32_t resolution,
                       uint64_t seed,
                       double drift,
                       int64_t loop_close_at,
                       uint64_t holdout_every);

/**
 * Load a trained atlas checkpoint directory; returns null on failure.
 *
 * # Safety
 * `dir` must be a valid nul-terminated string.
 */
VfAtlas *vf_atlas_load(const char *dir);

/**
 * # Safety
 * `atlas` must come from this library and not be freed twice.
 */
void vf_atlas_free(VfAtlas *atlas);

/**
 * Number of local field models; 0 for a null handle.
 *
 * # Safety
 * `atlas` must be a live handle or null.
 */
uintptr_t vf_atlas_model_count(const VfAtlas *atlas);

/**
 * Number of registered keyframes; 0 for a null handle.
 *
 * # Safety
 * `atlas` must be a live handle or null.
 */
uintptr_t vf_atlas_keyframe_count(const VfAtlas *atlas);

/**
 * Image size the atlas was trained at.
 *
 * # Safety
 * All pointers must be valid; `atlas` a live handle.
 */
VfStatus vf_atlas_image_size(const VfAtlas *atlas, uint32_t *width, uint32_t *height);

/**
 * Render a novel view at a camera pose given as
 * `[tx, ty, tz, qx, qy, qz, qw]` (in the checkpoint's rescaled world
 * frame). `rgb_out` receives width*height*3 bytes; `depth_out`, when not
 * null, receives width*height depths in meters (0 where no surface).
 *
 * # Safety
 * `atlas` must be a live handle, `pose7` must point to 7 doubles, and the
 * output buffers must be large enough as described above.
 */
VfStatus vf_atlas_render(const VfAtlas *atlas,
                         const double *pose7,
                         double blend_p,
                         uint8_t *rgb_out,
                         double *depth_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VIEWFIELD_H */

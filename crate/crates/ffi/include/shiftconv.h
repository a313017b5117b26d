#ifndef SHIFTCONV_H
#define SHIFTCONV_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define SC_ABI_VERSION 1

/**
 * Result codes shared by every call.
 */
typedef enum ScStatus {
  SC_STATUS_OK = 0,
  SC_STATUS_NULL_POINTER = 1,
  /**
   * Argument outside the operation's contract (shape, range, ...).
   */
  SC_STATUS_INVALID_ARGUMENT = 2,
  SC_STATUS_CONFIG = 3,
  SC_STATUS_PARSE = 4,
  SC_STATUS_CHECKPOINT = 5,
  SC_STATUS_NUMERICAL = 6,
  SC_STATUS_IO = 7,
  /**
   * A Rust panic was caught at the boundary.
   */
  SC_STATUS_INTERNAL = 8,
} ScStatus;

/**
 * Opaque network handle.
 */
typedef struct ScModel ScModel;

/**
 * Static facts about a loaded model.
 */
typedef struct ScModelInfo {
  uint32_t image_channels;
  /**
   * Search range of the cost volume in quarter-resolution pixels.
   */
  uint32_t maxdisp;
  bool refine_enabled;
  uint32_t param_tensors;
  uint64_t param_values;
  /**
   * Input height and width must be multiples of this.
   */
  uint32_t size_multiple;
} ScModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Version of this interface.
 */
uint32_t sc_abi_version(void);

/**
 * Message of the last failure on this thread; empty if none. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *sc_last_error(void);

/**
 * Loads a checkpoint written by the trainer.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ScStatus sc_model_load(const char *path, struct ScModel **out);

/**
 * Freshly initialised model from configuration text (`key = value` lines;
 * may be empty for the defaults).
 *
 * # Safety
 * `config` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ScStatus sc_model_new(const char *config, uint64_t seed, struct ScModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from `sc_model_load`/`sc_model_new` and not be used
 * afterwards.
 */
void sc_model_free(struct ScModel *model);

/**
 * Writes the model as a checkpoint at iteration 0 with empty optimizer
 * state, tagged stage 2 when refinement is enabled.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum ScStatus sc_model_save(const struct ScModel *model, const char *path);

/**
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum ScStatus sc_model_info(const struct ScModel *model, struct ScModelInfo *out);

/**
 * Predicts the left disparity map into `out_disp` (`height * width`
 * floats). Height and width must be multiples of `size_multiple`.
 *
 * # Safety
 * `left` and `right` must hold `channels * height * width` floats and
 * `out_disp` room for `height * width`.
 */
enum ScStatus sc_model_infer(const struct ScModel *model,
                             const float *left,
                             const float *right,
                             uint32_t channels,
                             uint32_t height,
                             uint32_t width,
                             float *out_disp);

/**
 * Learning rate at `iter` under the default schedule with the given
 * base rate.
 */
double sc_lr_schedule(uint64_t iter, double base_lr);

/**
 * Mean absolute error over pixels with finite, non-negative ground truth.
 *
 * # Safety
 * `pred` and `gt` must hold `height * width` floats; `out` must be valid.
 */
enum ScStatus sc_epe(const float *pred,
                     const float *gt,
                     uint32_t height,
                     uint32_t width,
                     double *out);

/**
 * Fraction of valid pixels with error above `threshold`.
 *
 * # Safety
 * As for [`sc_epe`].
 */
enum ScStatus sc_d1(const float *pred,
                    const float *gt,
                    uint32_t height,
                    uint32_t width,
                    float threshold,
                    double *out);

/**
 * Generates one synthetic stereo pair with the generator's default
 * layout and disparity range.
 *
 * # Safety
 * `left` and `right` need room for `channels * height * width` floats,
 * `disp` for `height * width`.
 */
enum ScStatus sc_synth_pair(uint32_t width,
                            uint32_t height,
                            uint32_t channels,
                            uint64_t seed,
                            float *left,
                            float *right,
                            float *disp);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SHIFTCONV_H */

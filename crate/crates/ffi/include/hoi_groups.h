#ifndef HOI_GROUPS_H
#define HOI_GROUPS_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum HoiStatus {
  HOI_STATUS_OK = 0,
  HOI_STATUS_NULL_POINTER = 1,
  HOI_STATUS_INVALID_ARGUMENT = 2,
  HOI_STATUS_CONFIG = 3,
  HOI_STATUS_DATA = 4,
  HOI_STATUS_IO = 5,
  HOI_STATUS_NON_FINITE = 6,
  HOI_STATUS_PANIC = 7,
} HoiStatus;

/**
 * Model and parameters behind a handle.
 */
typedef struct HoiModel HoiModel;

/**
 * One scored triplet. Boxes are `[cx, cy, w, h]`.
 */
typedef struct HoiDetection {
  double human[4];
  double object[4];
  size_t object_class;
  size_t interaction;
  double score;
} HoiDetection;

/**
 * Library version as a static NUL-terminated string.
 */
const char *hoi_version(void);

/**
 * Message of the last failed call on this thread, or null if it succeeded.
 * The pointer stays valid until the next call into the library.
 */
const char *hoi_last_error(void);

/**
 * Intersection over union of two boxes.
 *
 * # Safety
 * `a` and `b` point to four doubles each; `out` is writable.
 */
enum HoiStatus hoi_iou(const double *a, const double *b, double *out);

/**
 * Generalized IoU of two boxes, in `[-1, 1]`.
 *
 * # Safety
 * `a` and `b` point to four doubles each; `out` is writable.
 */
enum HoiStatus hoi_giou(const double *a, const double *b, double *out);

/**
 * Minimum-cost assignment of `rows` targets to `cols` candidates
 * (`rows <= cols`). `cost` is row-major; `assignment[r]` receives the column
 * given to row `r` and `total` the summed cost.
 *
 * # Safety
 * `cost` holds `rows * cols` doubles, `assignment` has room for `rows`
 * entries and `total` is writable.
 */
enum HoiStatus hoi_hungarian(const double *cost,
                             size_t rows,
                             size_t cols,
                             size_t *assignment,
                             double *total);

/**
 * Average precision of a score-ranked list of hit flags against `n_gt`
 * ground truths. `eleven_point` selects 11-point interpolation instead of
 * the all-point area. `out` receives -1 when `n_gt` is zero.
 *
 * # Safety
 * `hits` holds `len` bytes (0 or 1); `out` is writable.
 */
enum HoiStatus hoi_average_precision(const uint8_t *hits,
                                     size_t len,
                                     size_t n_gt,
                                     bool eleven_point,
                                     double *out);

/**
 * Builds a model from a run config file and loads a checkpoint into it.
 * A null `config_path` uses the default configuration; a null
 * `checkpoint_path` keeps the seeded initial parameters.
 *
 * # Safety
 * Paths are null or NUL-terminated strings; `out` is writable.
 */
enum HoiStatus hoi_model_load(const char *config_path,
                              const char *checkpoint_path,
                              struct HoiModel **out);

/**
 * Releases a handle from [`hoi_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` is null or a live handle not used afterwards.
 */
void hoi_model_free(struct HoiModel *model);

/**
 * Number of scalar parameters of a model.
 *
 * # Safety
 * `model` is a live handle; `out` is writable.
 */
enum HoiStatus hoi_model_num_params(const struct HoiModel *model, size_t *out);

/**
 * Scores one scene. `features` is a row-major `tokens x d_feature` grid and
 * `pos` the matching `tokens x d_entity` position encoding. Predictions go
 * through pairwise NMS with the config's threshold; at most `capacity` are
 * copied to `detections` in score order and `count` receives the number
 * copied.
 *
 * # Safety
 * `features` and `pos` hold the stated number of doubles; `detections` has
 * room for `capacity` entries; `count` is writable.
 */
enum HoiStatus hoi_model_predict(const struct HoiModel *model,
                                 const double *features,
                                 const double *pos,
                                 size_t tokens,
                                 struct HoiDetection *detections,
                                 size_t capacity,
                                 size_t *count);

#endif  /* HOI_GROUPS_H */

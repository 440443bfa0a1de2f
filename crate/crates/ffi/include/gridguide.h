#ifndef GRIDGUIDE_H
#define GRIDGUIDE_H

/* Generated by cbindgen; do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Status codes; 1–3 match the CLI exit codes.
 */
typedef enum GgStatus {
  GG_STATUS_OK = 0,
  GG_STATUS_USAGE = 1,
  GG_STATUS_DATA = 2,
  GG_STATUS_NUMERIC = 3,
  GG_STATUS_NULL_POINTER = 4,
  GG_STATUS_BUFFER_TOO_SMALL = 5,
  GG_STATUS_PANIC = 6,
} GgStatus;

/**
 * Opaque model handle.
 */
typedef struct GgModel GgModel;

/**
 * Normalised box `(x, y, w, h)`.
 */
typedef struct GgBox {
  double x;
  double y;
  double w;
  double h;
} GgBox;

typedef struct GgMetrics {
  double iou;
  double size_score;
  double dist_score;
} GgMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *gg_last_error(void);

/**
 * Library version as a static string.
 */
const char *gg_version(void);

/**
 * Fresh seeded model. `config_path` may be null for defaults.
 *
 * # Safety
 * `config_path` must be null or a valid C string; `out` must be writable.
 */
enum GgStatus gg_model_new(const char *config_path, uint64_t seed, struct GgModel **out);

/**
 * Loads a checkpoint written by the CLI or [`gg_model_save`].
 *
 * # Safety
 * `path` must be a valid C string; `out` must be writable.
 */
enum GgStatus gg_model_load(const char *path, struct GgModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be a valid C string.
 */
enum GgStatus gg_model_save(const struct GgModel *model, const char *path);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from this library not yet freed.
 */
void gg_model_free(struct GgModel *model);

/**
 * Guidance map for an `height×width` RGB image (row-major, channels last,
 * values in `[0, 1]`). Writes `out_h·out_w` values into `out` when
 * `out_len` suffices; the grid size is reported either way.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum GgStatus gg_guidance_map(const struct GgModel *model,
                              const double *rgb,
                              size_t height,
                              size_t width,
                              const char *caption,
                              double *out,
                              size_t out_len,
                              size_t *out_h,
                              size_t *out_w);

/**
 * Placement box predicted from the guidance map.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum GgStatus gg_predict_box(const struct GgModel *model,
                             const double *rgb,
                             size_t height,
                             size_t width,
                             const char *caption,
                             struct GgBox *out);

/**
 * Full guided run on a PPM file; writes `output.ppm`, `guidance.pgm` and
 * `trace.tsv` into `out_dir`.
 *
 * # Safety
 * All strings must be valid C strings.
 */
enum GgStatus gg_run(const struct GgModel *model,
                     const char *image_path,
                     const char *caption,
                     const char *out_dir);

/**
 * Placement energy of a `rows×cols` attention matrix against a mask of
 * `rows` cells.
 *
 * # Safety
 * `attention` must hold `rows·cols` values, `mask` `rows`.
 */
enum GgStatus gg_energy(const double *attention,
                        size_t rows,
                        size_t cols,
                        const double *mask,
                        double *out);

/**
 * IoU, size score and distance score of two boxes.
 *
 * # Safety
 * `out` must be writable.
 */
enum GgStatus gg_box_metrics(struct GgBox a, struct GgBox b, struct GgMetrics *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* GRIDGUIDE_H */

#ifndef KGS_H
#define KGS_H

#include <stddef.h>
#include <stdint.h>
#include <stdbool.h>

typedef enum KgsStatus {
  KGS_STATUS_OK = 0,
  KGS_STATUS_NULL_POINTER = 1,
  KGS_STATUS_INVALID_UTF8 = 2,
  KGS_STATUS_PARSE = 3,
  KGS_STATUS_FIELD = 4,
  KGS_STATUS_DIMENSION = 5,
  KGS_STATUS_DATA = 6,
  KGS_STATUS_SHAPE = 7,
  KGS_STATUS_CONFIG = 8,
  KGS_STATUS_MATRIX = 9,
  KGS_STATUS_CONTRACT = 10,
  KGS_STATUS_IO = 11,
  KGS_STATUS_BUFFER_TOO_SMALL = 12,
  KGS_STATUS_PANIC = 13,
} KgsStatus;

/**
 * Rendered heatmaps laid out as `[view][frame][row][column]`.
 */
typedef struct KgsHeatmaps KgsHeatmaps;

/**
 * A trained classifier restored from a checkpoint.
 */
typedef struct KgsModel KgsModel;

/**
 * A skeleton sequence.
 */
typedef struct KgsSequence KgsSequence;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the next call.
 */
const char *kgs_last_error_message(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum KgsStatus kgs_sequence_load(const char *path, struct KgsSequence **out);

/**
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum KgsStatus kgs_sequence_parse(const char *json, struct KgsSequence **out);

/**
 * Builds a sequence from `frames·joints·channels` row-major coordinates.
 * A negative `label` means unlabeled.
 *
 * # Safety
 * `data` must point to `frames·joints·channels` readable doubles; `out` must be writable.
 */
enum KgsStatus kgs_sequence_from_array(uintptr_t frames,
                                       uintptr_t joints,
                                       uintptr_t channels,
                                       const double *data,
                                       int64_t label,
                                       struct KgsSequence **out);

/**
 * # Safety
 * `seq` must be null or a pointer from a `kgs_sequence_*` constructor.
 */
void kgs_sequence_free(struct KgsSequence *seq);

/**
 * # Safety
 * `seq` must be a live sequence handle; the out pointers must be writable.
 */
enum KgsStatus kgs_sequence_dims(const struct KgsSequence *seq,
                                 uintptr_t *frames,
                                 uintptr_t *joints,
                                 uintptr_t *channels);

/**
 * Bhattacharyya distance between two 2-D Gaussians. Covariances are passed
 * as `{xx, xy, yy}`.
 *
 * # Safety
 * `mu_*` must point to 2 doubles, `sigma_*` to 3, and `out` must be writable.
 */
enum KgsStatus kgs_bhattacharyya(const double *mu_i,
                                 const double *sigma_i,
                                 const double *mu_j,
                                 const double *sigma_j,
                                 double *out);

/**
 * Normalizes and renders `seq` at `size × size` with the default settings.
 *
 * # Safety
 * `seq` must be a live sequence handle; `out` must be writable.
 */
enum KgsStatus kgs_render(const struct KgsSequence *seq,
                          uintptr_t size,
                          bool isotropic,
                          struct KgsHeatmaps **out);

/**
 * # Safety
 * `maps` must be a live heatmap handle; the out pointers must be writable.
 */
enum KgsStatus kgs_heatmaps_dims(const struct KgsHeatmaps *maps,
                                 uintptr_t *views,
                                 uintptr_t *frames,
                                 uintptr_t *height,
                                 uintptr_t *width);

/**
 * Copies all heatmap values into `out`, which must hold `views·frames·height·width` doubles.
 *
 * # Safety
 * `maps` must be a live heatmap handle; `out` must have room for `capacity` doubles.
 */
enum KgsStatus kgs_heatmaps_copy(const struct KgsHeatmaps *maps, double *out, uintptr_t capacity);

/**
 * # Safety
 * `maps` must be null or a pointer from [`kgs_render`].
 */
void kgs_heatmaps_free(struct KgsHeatmaps *maps);

/**
 * Writes the `joints × joints` prior adjacency of `seq`, row-major.
 *
 * # Safety
 * `seq` must be a live sequence handle; `out` must have room for `capacity` doubles.
 */
enum KgsStatus kgs_prior_adjacency(const struct KgsSequence *seq, double *out, uintptr_t capacity);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum KgsStatus kgs_model_load(const char *path, struct KgsModel **out);

/**
 * # Safety
 * `model` must be a live model handle and `out_class` writable.
 */
enum KgsStatus kgs_model_num_classes(const struct KgsModel *model, uintptr_t *out_class);

/**
 * # Safety
 * `model` and `seq` must be live handles; `out_class` must be writable.
 */
enum KgsStatus kgs_model_predict(const struct KgsModel *model,
                                 const struct KgsSequence *seq,
                                 uintptr_t *out_class);

/**
 * # Safety
 * `model` must be null or a pointer from [`kgs_model_load`].
 */
void kgs_model_free(struct KgsModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KGS_H */

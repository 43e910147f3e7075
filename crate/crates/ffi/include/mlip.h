#ifndef MLIP_H
#define MLIP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MlipStatus {
  MLIP_STATUS_OK = 0,
  MLIP_STATUS_NULL_POINTER = 1,
  MLIP_STATUS_INVALID_INPUT = 2,
  MLIP_STATUS_SHAPE = 3,
  MLIP_STATUS_NON_FINITE = 4,
  MLIP_STATUS_CONFIG = 5,
  MLIP_STATUS_FORMAT = 6,
  MLIP_STATUS_DIVERGED = 7,
  MLIP_STATUS_IO = 8,
  MLIP_STATUS_UTF8 = 9,
  MLIP_STATUS_PANIC = 10,
} MlipStatus;

/**
 * Training configuration.
 */
typedef struct MlipConfig MlipConfig;

/**
 * A model together with the configuration it was built from.
 */
typedef struct MlipModel MlipModel;

typedef struct MlipEvalMetrics {
  double recall_i2t_at_1;
  double recall_i2t_at_5;
  double recall_t2i_at_1;
  double recall_t2i_at_5;
  double recall_at_1;
  double recall_at_5;
  double cluster_purity;
  double nmi;
  double false_negative_gap;
} MlipEvalMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t mlip_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mlip_version(void);

/**
 * A configuration holding every default.
 */
struct MlipConfig *mlip_config_new(void);

/**
 * Parse a `key = value` config file into a new handle.
 *
 * # Safety
 * `file` must be a valid C string; `out` must be writable.
 */
enum MlipStatus mlip_config_load(const char *file, struct MlipConfig **out);

/**
 * Set one key as it would appear in a config file.
 *
 * # Safety
 * `cfg` must come from this library; `key` and `value` must be C strings.
 */
enum MlipStatus mlip_config_set(struct MlipConfig *cfg, const char *key, const char *value);

/**
 * # Safety
 * `cfg` must be null or a handle from this library not yet freed.
 */
void mlip_config_free(struct MlipConfig *cfg);

/**
 * Train with `cfg`. When `out_dir` is non-null, run files (metrics.csv,
 * config.txt, checkpoint.bin) are written there. `metrics` may be null.
 *
 * # Safety
 * `cfg` must be a live handle, `out_dir` null or a C string, `out`
 * writable, `metrics` null or writable.
 */
enum MlipStatus mlip_train(const struct MlipConfig *cfg,
                           const char *out_dir,
                           struct MlipModel **out,
                           struct MlipEvalMetrics *metrics);

/**
 * Load a checkpoint; `config.txt` must sit in the same directory.
 *
 * # Safety
 * `checkpoint` must be a C string; `out` must be writable.
 */
enum MlipStatus mlip_model_load(const char *checkpoint, struct MlipModel **out);

/**
 * Write `checkpoint.bin` and `config.txt` into `dir`, creating it.
 *
 * # Safety
 * `model` must be a live handle and `dir` a C string.
 */
enum MlipStatus mlip_model_save(const struct MlipModel *model, const char *dir);

/**
 * Held-out metrics for `model` on the dataset its configuration describes.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum MlipStatus mlip_model_evaluate(const struct MlipModel *model, struct MlipEvalMetrics *out);

/**
 * # Safety
 * `model` must be null or a handle from this library not yet freed.
 */
void mlip_model_free(struct MlipModel *model);

/**
 * Balanced assignment of a row-major `b × c` score matrix; the `b × c`
 * codes (rows summing to 1) go to `codes`.
 *
 * # Safety
 * `scores` and `codes` must each hold `b·c` doubles.
 */
enum MlipStatus mlip_sinkhorn(const double *scores,
                              size_t b,
                              size_t c,
                              double eps,
                              size_t iters,
                              double *codes);

/**
 * Mean InfoNCE of row-major `b × d` anchors against candidates.
 * `column_anchored` selects the text-to-image direction.
 *
 * # Safety
 * `anchors` and `candidates` must each hold `b·d` doubles; `out` writable.
 */
enum MlipStatus mlip_info_nce(const double *anchors,
                              const double *candidates,
                              size_t b,
                              size_t d,
                              double tau,
                              bool column_anchored,
                              double *out);

/**
 * Whole-model gradient check over `seeds` seeds. `passed` receives 1 when
 * every tensor is within `tolerance`, else 0.
 *
 * # Safety
 * `passed` must be writable.
 */
enum MlipStatus mlip_gradcheck(uint64_t seeds, double tolerance, int *passed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MLIP_H */

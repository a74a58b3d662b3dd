#ifndef SCSM_H
#define SCSM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. Zero is success.
 */
typedef enum ScsmStatus {
  SCSM_STATUS_OK = 0,
  SCSM_STATUS_CONFIG = 1,
  SCSM_STATUS_IO = 2,
  SCSM_STATUS_FORMAT = 3,
  SCSM_STATUS_DIMENSION = 4,
  SCSM_STATUS_NUMERIC = 5,
  SCSM_STATUS_CONTRACT = 6,
  SCSM_STATUS_INCOMPATIBLE = 7,
  SCSM_STATUS_NULL_POINTER = 8,
  SCSM_STATUS_INVALID_ARGUMENT = 9,
  SCSM_STATUS_PANIC = 10,
} ScsmStatus;

/**
 * Model configuration.
 */
typedef struct ScsmConfig ScsmConfig;

/**
 * A model with its parameters.
 */
typedef struct ScsmModel ScsmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Length in bytes of the calling thread's last error message, without the NUL.
 */
size_t scsm_last_error_length(void);

/**
 * Copies the last error message into `buf` as a NUL-terminated string,
 * truncating to `cap - 1` bytes. Returns the full message length.
 *
 * # Safety
 * `buf` must be null or valid for `cap` bytes.
 */
size_t scsm_last_error_message(char *buf, size_t cap);

/**
 * Static, NUL-terminated crate version.
 */
const char *scsm_version(void);

/**
 * # Safety
 * `out` must be valid for one pointer write.
 */
enum ScsmStatus scsm_config_default(struct ScsmConfig **out);

/**
 * Sets one `key=value` entry, using the same keys as the text format.
 *
 * # Safety
 * `config` must come from this library; `key` and `value` must be NUL-terminated.
 */
enum ScsmStatus scsm_config_set(struct ScsmConfig *config, const char *key, const char *value);

/**
 * # Safety
 * `config` must come from this library.
 */
enum ScsmStatus scsm_config_validate(const struct ScsmConfig *config);

/**
 * # Safety
 * `config` must be null or come from this library, and is invalid afterwards.
 */
void scsm_config_free(struct ScsmConfig *config);

/**
 * Builds a freshly initialised model. The configuration is copied.
 *
 * # Safety
 * `config` must come from this library; `out` must be valid for one pointer write.
 */
enum ScsmStatus scsm_model_new(const struct ScsmConfig *config,
                               uint64_t seed,
                               struct ScsmModel **out);

/**
 * # Safety
 * `path` must be NUL-terminated; `out` must be valid for one pointer write.
 */
enum ScsmStatus scsm_model_load(const char *path, struct ScsmModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum ScsmStatus scsm_model_save(const struct ScsmModel *model, const char *path);

/**
 * Input channels, height, width and class count of the model. Any output
 * pointer may be null.
 *
 * # Safety
 * `model` must come from this library; non-null outputs must be writable.
 */
enum ScsmStatus scsm_model_shape(const struct ScsmModel *model,
                                 size_t *channels,
                                 size_t *height,
                                 size_t *width,
                                 size_t *classes);

/**
 * Segments one `C×H×W` image given row-major in `image`, writing `H×W`
 * class indices to `labels`.
 *
 * # Safety
 * `image` must be valid for `image_len` reads and `labels` for `labels_len` writes.
 */
enum ScsmStatus scsm_model_predict(const struct ScsmModel *model,
                                   const double *image,
                                   size_t image_len,
                                   uint32_t *labels,
                                   size_t labels_len);

/**
 * # Safety
 * `model` must be null or come from this library, and is invalid afterwards.
 */
void scsm_model_free(struct ScsmModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCSM_H */

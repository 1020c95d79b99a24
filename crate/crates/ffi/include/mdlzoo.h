#ifndef MDLZOO_H
#define MDLZOO_H

#include <stddef.h>
#include <stdint.h>

typedef enum MdlzStatus {
  MDLZ_STATUS_OK = 0,
  MDLZ_STATUS_NULL_POINTER = 1,
  MDLZ_STATUS_INVALID_ARGUMENT = 2,
  MDLZ_STATUS_IO = 3,
  MDLZ_STATUS_PARSE = 4,
  MDLZ_STATUS_CHECKPOINT = 5,
  MDLZ_STATUS_SHAPE = 6,
  MDLZ_STATUS_BUFFER_TOO_SMALL = 7,
  MDLZ_STATUS_INTERNAL = 8,
} MdlzStatus;

// Character or word n-gram model.
typedef struct MdlzLm MdlzLm;

// Network plus its charset and class priors.
typedef struct MdlzModel MdlzModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *mdlz_version(void);

// Copy the calling thread's last error message into `buf`.
//
// # Safety
// `buf` must hold `capacity` bytes or be null; `needed` may be null.
enum MdlzStatus mdlz_last_error(char *buf, size_t capacity, size_t *needed);

// Parameter and multiply-accumulate totals of `arch` at `height × width`.
//
// # Safety
// `arch` must be a NUL-terminated string; outputs may be null.
enum MdlzStatus mdlz_audit(const char *arch,
                           size_t height,
                           size_t width,
                           uint64_t *params,
                           uint64_t *macs);

// Glorot-initialized reference network of `arch` over the default charset.
//
// # Safety
// `arch` must be a NUL-terminated string and `out` writable.
enum MdlzStatus mdlz_model_new(const char *arch, uint64_t seed, struct MdlzModel **out);

// Load a checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum MdlzStatus mdlz_model_load(const char *path, struct MdlzModel **out);

// # Safety
// `model` must be a live handle.
enum MdlzStatus mdlz_model_save(const struct MdlzModel *model, const char *path);

// # Safety
// `model` must come from this library and not be used afterwards.
void mdlz_model_free(struct MdlzModel *model);

// # Safety
// `model` must be a live handle and `out` writable.
enum MdlzStatus mdlz_model_param_count(const struct MdlzModel *model, uint64_t *out);

// # Safety
// `model` must be a live handle and `out` writable.
enum MdlzStatus mdlz_model_class_count(const struct MdlzModel *model, size_t *out);

// Softmax posteriors `[frames × classes]` of an 8-bit grayscale line image
// (255 = paper). Call with a null `probs` to query `frames` and `classes`.
//
// # Safety
// `pixels` must hold `width·height` bytes and `probs` `capacity` doubles.
enum MdlzStatus mdlz_model_posteriors(const struct MdlzModel *model,
                                      const uint8_t *pixels,
                                      size_t width,
                                      size_t height,
                                      double *probs,
                                      size_t capacity,
                                      size_t *frames,
                                      size_t *classes);

// Transcribe a line image. `beam_width` 0 decodes greedily; `char_lm` may
// be null. `needed` receives the UTF-8 size including the NUL.
//
// # Safety
// `pixels` must hold `width·height` bytes and `text` `capacity` bytes.
enum MdlzStatus mdlz_model_decode(const struct MdlzModel *model,
                                  const uint8_t *pixels,
                                  size_t width,
                                  size_t height,
                                  const struct MdlzLm *char_lm,
                                  size_t beam_width,
                                  double lm_weight,
                                  double prior_weight,
                                  double insertion_bonus,
                                  char *text,
                                  size_t capacity,
                                  size_t *needed);

// Load an ARPA n-gram model.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum MdlzStatus mdlz_lm_load(const char *path, struct MdlzLm **out);

// # Safety
// `lm` must be a live handle and `out` writable.
enum MdlzStatus mdlz_lm_order(const struct MdlzLm *lm, size_t *out);

// # Safety
// `lm` must come from this library and not be used afterwards.
void mdlz_lm_free(struct MdlzLm *lm);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MDLZOO_H */

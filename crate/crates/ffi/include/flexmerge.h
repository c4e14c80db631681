#ifndef FLEXMERGE_H
#define FLEXMERGE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. Zero is success.
typedef enum FmStatus {
  FM_STATUS_OK = 0,
  FM_STATUS_NULL_ARGUMENT = 1,
  FM_STATUS_INVALID_UTF8 = 2,
  FM_STATUS_IO = 3,
  FM_STATUS_CHECKPOINT = 4,
  FM_STATUS_MERGE = 5,
  FM_STATUS_INPUT = 6,
  FM_STATUS_FORBIDDEN = 7,
  FM_STATUS_INVARIANT = 8,
  FM_STATUS_NUMERIC = 9,
  FM_STATUS_CONFIG = 10,
  FM_STATUS_BUFFER_TOO_SMALL = 11,
  FM_STATUS_PANIC = 12,
} FmStatus;

// A loaded dense, branch or merged model.
typedef struct FmModel FmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *fm_version(void);

// Copies the calling thread's last error message into `buf` and returns
// the size it needs, NUL included. Pass a null `buf` to query the size.
//
// # Safety
// `buf` must be null or valid for `cap` bytes.
size_t fm_last_error(char *buf, size_t cap);

// Loads a checkpoint directory.
//
// # Safety
// `dir` must be a NUL-terminated string and `out` a valid pointer.
enum FmStatus fm_model_load(const char *dir, struct FmModel **out);

// Writes a model to a checkpoint directory.
//
// # Safety
// `model` must come from this library and `dir` must be NUL-terminated.
enum FmStatus fm_model_save(const struct FmModel *model, const char *dir);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void fm_model_free(struct FmModel *model);

// Number of experts per layer, the public expert included.
//
// # Safety
// `model` must come from this library and `out` must be valid.
enum FmStatus fm_model_num_experts(const struct FmModel *model, size_t *out);

// Number of experts each token activates.
//
// # Safety
// `model` must come from this library and `out` must be valid.
enum FmStatus fm_model_top_k(const struct FmModel *model, size_t *out);

// Copies the id of expert `index` as a NUL-terminated string.
//
// # Safety
// `buf` must be valid for `cap` bytes; `needed` may be null.
enum FmStatus fm_model_expert_id(const struct FmModel *model,
                                 size_t index,
                                 char *buf,
                                 size_t cap,
                                 size_t *needed);

// Merges expert bundle directories into the anchor checkpoint at
// `anchor_dir`. `biases` may be null for the default bias, otherwise it
// holds `n_bundles` values. `top_k` of 0 selects the default.
//
// # Safety
// All strings must be NUL-terminated and `bundle_dirs` must hold
// `n_bundles` of them.
enum FmStatus fm_merge(const char *anchor_dir,
                       const char *const *bundle_dirs,
                       size_t n_bundles,
                       const float *biases,
                       size_t top_k,
                       struct FmModel **out);

// Returns a new model without `expert`.
//
// # Safety
// `model` must come from this library, `expert` must be NUL-terminated.
enum FmStatus fm_opt_out(const struct FmModel *model, const char *expert, struct FmModel **out);

// Returns a new model with `expert`'s selection bias replaced. The bias
// must be non-positive; negative infinity disables the expert.
//
// # Safety
// `model` must come from this library, `expert` must be NUL-terminated.
enum FmStatus fm_set_bias(const struct FmModel *model,
                          const char *expert,
                          float bias,
                          struct FmModel **out);

// Perplexity of one document given as raw bytes.
//
// # Safety
// `text` must be valid for `len` bytes and `out` must be valid.
enum FmStatus fm_perplexity(const struct FmModel *model,
                            const uint8_t *text,
                            size_t len,
                            double *out);

// Continues `prompt` by up to `max_new_tokens` bytes. Non-zero `greedy`
// takes the argmax; otherwise tokens are sampled with `seed`. The
// continuation (without NUL) goes to `buf`; `*written` receives its length.
//
// # Safety
// `prompt` must be valid for `len` bytes, `buf` for `cap` bytes and
// `written` must be valid or null.
enum FmStatus fm_generate(const struct FmModel *model,
                          const uint8_t *prompt,
                          size_t len,
                          size_t max_new_tokens,
                          uint64_t seed,
                          int greedy,
                          uint8_t *buf,
                          size_t cap,
                          size_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLEXMERGE_H */

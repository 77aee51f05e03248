#ifndef MENTION_NMT_H
#define MENTION_NMT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MnStatus {
  MN_STATUS_OK = 0,
  MN_STATUS_NULL_POINTER = 1,
  MN_STATUS_INVALID_UTF8 = 2,
  MN_STATUS_IO = 3,
  MN_STATUS_INPUT = 4,
  MN_STATUS_INCOMPATIBLE = 5,
  MN_STATUS_CONTRACT = 6,
  MN_STATUS_PANIC = 7,
  MN_STATUS_INTERNAL = 8,
} MnStatus;

/**
 * A loaded checkpoint with its BPE model and vocabularies.
 */
typedef struct MnModel MnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after success.
 * Valid until the next call on the same thread.
 */
const char *mn_last_error(void);

/**
 * Library version as a static string.
 */
const char *mn_version(void);

/**
 * Loads a checkpoint directory. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum MnStatus mn_model_load(const char *path, struct MnModel **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` must come from `mn_model_load` and not be used afterwards.
 */
void mn_model_free(struct MnModel *model);

/**
 * Writes 1 to `*out` for a mention-attention model, 0 for a baseline.
 *
 * # Safety
 * Both pointers must be valid.
 */
enum MnStatus mn_model_is_mention(const struct MnModel *model, int *out);

/**
 * Translates one whitespace-tokenized sentence with beam search and the
 * predicted mention mask. `beam` 1 is greedy. On success `*out` holds a
 * string to release with `mn_string_free`.
 *
 * # Safety
 * `model` must be a live handle, `src` a NUL-terminated string, `out` valid.
 */
enum MnStatus mn_translate(const struct MnModel *model, const char *src, uint32_t beam, char **out);

/**
 * Teacher-forced log-probability of `tgt` (followed by EOS) given `src`.
 *
 * # Safety
 * `model` must be a live handle, strings NUL-terminated, `out` valid.
 */
enum MnStatus mn_score(const struct MnModel *model, const char *src, const char *tgt, double *out);

/**
 * Releases a string returned by the library; null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void mn_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MENTION_NMT_H */

/* C interface to the cdistill library. Generated; do not edit. */

#ifndef CDISTILL_H
#define CDISTILL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code shared by every fallible call.
 */
typedef enum CdStatus {
  /**
   * The call succeeded.
   */
  CdStatus_Ok = 0,
  /**
   * A required pointer argument was null.
   */
  CdStatus_NullArgument = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  CdStatus_InvalidUtf8 = 2,
  /**
   * An argument was rejected; `cd_last_error` explains which one.
   */
  CdStatus_InvalidArgument = 3,
  /**
   * A file could not be read or written.
   */
  CdStatus_Io = 4,
  /**
   * A file was read but its contents were malformed.
   */
  CdStatus_Parse = 5,
  /**
   * An output buffer was too small; the length output holds the
   * required size.
   */
  CdStatus_BufferTooSmall = 6,
} CdStatus;

/**
 * Loaded model behind an opaque pointer. Immutable after creation, so a
 * handle may be shared across threads until `cd_model_free`.
 */
typedef struct CdModel CdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on the calling thread, as a
 * NUL-terminated string. Never null; empty until a call fails. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *cd_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cd_version(void);

/**
 * Loads a model snapshot (either saved format) and stores the new handle
 * in `*out`. On failure `*out` is left untouched.
 *
 * # Safety
 * `path` must point to a NUL-terminated string and `out` to writable
 * memory for one pointer.
 */
enum CdStatus cd_model_load(const char *path, struct CdModel **out);

/**
 * Releases a handle returned by `cd_model_load`. Accepts null.
 *
 * # Safety
 * `model` must be null or a handle that has not been freed yet.
 */
void cd_model_free(struct CdModel *model);

/**
 * Number of tokens in the model vocabulary, which is also the length of
 * every probability buffer used by this interface. Returns 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t cd_model_vocab_len(const struct CdModel *model);

/**
 * Copies the text of token `id` into `buf` as a NUL-terminated string.
 * `*written` (optional) receives the text length without the terminator;
 * on `BufferTooSmall` it holds the required capacity including it.
 *
 * # Safety
 * `model` must be a live handle; `buf` must point to `cap` writable
 * bytes when `cap` is nonzero; `written` must be null or writable.
 */
enum CdStatus cd_model_token(const struct CdModel *model,
                             uint32_t id,
                             char *buf,
                             size_t cap,
                             size_t *written);

/**
 * Fills `probs` with the model distribution over the token following
 * `prefix`. `probs_len` must equal the vocabulary size; an empty prefix
 * is allowed and yields the base distribution.
 *
 * # Safety
 * `model` must be a live handle; `prefix` must point to `prefix_len`
 * token ids (null allowed when the length is zero); `probs` must point
 * to `probs_len` writable doubles.
 */
enum CdStatus cd_model_next_probs(const struct CdModel *model,
                                  const uint32_t *prefix,
                                  size_t prefix_len,
                                  double *probs,
                                  size_t probs_len);

/**
 * Greedy-decodes after `prefix` and writes the generated ids, prompt
 * excluded, into `out`. Generation stops after at most `max_new` tokens
 * or right after emitting `eos` when `eos` is nonnegative. `*out_len`
 * receives the number of generated tokens; when they exceed `cap` the
 * call reports `BufferTooSmall` with the required size there instead.
 *
 * # Safety
 * `model` must be a live handle; `prefix` must point to `prefix_len`
 * token ids; `out` must point to `cap` writable ids when `cap` is
 * nonzero; `out_len` must be writable.
 */
enum CdStatus cd_model_greedy(const struct CdModel *model,
                              const uint32_t *prefix,
                              size_t prefix_len,
                              int64_t eos,
                              size_t max_new,
                              uint32_t *out,
                              size_t cap,
                              size_t *out_len);

/**
 * Scores one decoding step from a raw expert/amateur distribution pair.
 *
 * Both inputs are probability vectors of length `len`. The call writes
 * the divergence of the expert from the amateur (floored at `epsilon`)
 * to `*kl`, the retention decision `kl > beta` to `*selected`, the
 * support (ids whose expert mass is at least `alpha` times the expert
 * maximum) to `support`, and the contrastive soft target, aligned with
 * the support, to `target`. `*support_len` receives the support size;
 * when it exceeds `cap` the call reports `BufferTooSmall` with the
 * required size there and leaves the buffers untouched.
 *
 * # Safety
 * `expert` and `amateur` must point to `len` doubles; `kl`, `selected`,
 * and `support_len` must be writable; `support` and `target` must point
 * to `cap` writable entries each when `cap` is nonzero.
 */
enum CdStatus cd_score_step(const double *expert,
                            const double *amateur,
                            size_t len,
                            double alpha,
                            double beta,
                            double epsilon,
                            double *kl,
                            bool *selected,
                            uint32_t *support,
                            double *target,
                            size_t cap,
                            size_t *support_len);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* CDISTILL_H */

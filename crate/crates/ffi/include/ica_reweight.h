#ifndef ICA_REWEIGHT_H
#define ICA_REWEIGHT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. `Ok` is zero; everything else is a failure.
 */
typedef enum IcaStatus {
  ICA_STATUS_OK = 0,
  ICA_STATUS_NULL_POINTER = 1,
  ICA_STATUS_INVALID_ARGUMENT = 2,
  ICA_STATUS_IO = 3,
  ICA_STATUS_CHECKPOINT = 4,
  ICA_STATUS_CONTEXT_OVERFLOW = 5,
  ICA_STATUS_PANIC = 6,
} IcaStatus;

/**
 * Opaque model handle.
 */
typedef struct IcaModel IcaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *ica_last_error(void);

/**
 * Creates a freshly initialized model.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum IcaStatus ica_model_new(size_t vocab,
                             size_t d_model,
                             size_t n_layers,
                             size_t n_heads,
                             size_t n_ctx,
                             size_t query_offset,
                             uint64_t seed,
                             struct IcaModel **out);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum IcaStatus ica_model_load(const char *path, struct IcaModel **out);

/**
 * Writes a checkpoint file.
 *
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
enum IcaStatus ica_model_save(const struct IcaModel *model, const char *path);

/**
 * Releases a handle. NULL is ignored.
 *
 * # Safety
 * `model` must come from `ica_model_new`/`ica_model_load` and not be used afterwards.
 */
void ica_model_free(struct IcaModel *model);

/**
 * Number of scalar parameters, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t ica_model_num_params(const struct IcaModel *model);

/**
 * −log π(y | x) summed over response tokens.
 *
 * # Safety
 * Token pointers must reference the given number of readable `u32`s;
 * `out_loss` must be writable.
 */
enum IcaStatus ica_nll(const struct IcaModel *model,
                       const uint32_t *prompt,
                       size_t prompt_len,
                       const uint32_t *response,
                       size_t response_len,
                       double *out_loss);

/**
 * SFT in-context approximation score ℓ(y | x) − ℓ(y | demos, x).
 *
 * # Safety
 * All array pointers must reference the stated number of readable elements;
 * `demo_tokens` holds the sum of all demo prompt and response lengths.
 */
enum IcaStatus ica_score_sft(const struct IcaModel *model,
                             const uint32_t *prompt,
                             size_t prompt_len,
                             const uint32_t *response,
                             size_t response_len,
                             const uint32_t *demo_tokens,
                             const size_t *demo_prompt_lens,
                             const size_t *demo_response_lens,
                             size_t n_demos,
                             double *out_score);

/**
 * Per-batch max-min weights of `n` scores into `out_weights`.
 *
 * # Safety
 * `scores` must hold `n` readable and `out_weights` `n` writable doubles.
 */
enum IcaStatus ica_maxmin_weights(const double *scores, size_t n, double *out_weights);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ICA_REWEIGHT_H */

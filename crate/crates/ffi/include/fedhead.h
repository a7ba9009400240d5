#ifndef FEDHEAD_H
#define FEDHEAD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum FhStatus {
  FH_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  FH_STATUS_NULL_POINTER = 1,
  /**
   * A length or dimension did not match the head.
   */
  FH_STATUS_SHAPE = 2,
  /**
   * A label was outside `0..C`.
   */
  FH_STATUS_LABEL = 3,
  /**
   * An argument was out of range (zero dimensions, empty batch, bad rate).
   */
  FH_STATUS_USAGE = 4,
  /**
   * Training produced a non-finite parameter; the head is unchanged.
   */
  FH_STATUS_NUMERIC = 5,
  /**
   * Model bytes were shorter or longer than their header implies.
   */
  FH_STATUS_TRUNCATED = 6,
  FH_STATUS_BAD_MAGIC = 7,
  /**
   * Payload checksum mismatch.
   */
  FH_STATUS_CORRUPT = 8,
  /**
   * Malformed frames or an unencodable model.
   */
  FH_STATUS_ENCODING = 9,
  /**
   * Output buffer too small; the required size was written.
   */
  FH_STATUS_BUFFER_TOO_SMALL = 10,
  FH_STATUS_PANIC = 11,
  FH_STATUS_INTERNAL = 12,
} FhStatus;

/**
 * Opaque head handle.
 */
typedef struct FhHead FhHead;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Number of trainable parameters, `C*E + C`.
 */
size_t fh_param_count(uint32_t embedding_dim, uint32_t num_classes);

/**
 * Bytes of float32 parameter storage for a head of this shape.
 */
size_t fh_footprint_bytes(uint32_t embedding_dim, uint32_t num_classes);

/**
 * Size of an encoded model of this shape (16-byte header plus payload).
 */
size_t fh_encoded_len(uint32_t embedding_dim, uint32_t num_classes);

/**
 * Size of the framed form of an encoded model of this shape.
 */
size_t fh_framed_len(uint32_t embedding_dim, uint32_t num_classes);

/**
 * Static NUL-terminated name of a status code.
 */
const char *fh_status_str(enum FhStatus status);

/**
 * Creates a zero-initialised head.
 *
 * # Safety
 * `out` must be valid for a pointer write.
 */
enum FhStatus fh_head_new_zeros(uint32_t embedding_dim, uint32_t num_classes, struct FhHead **out);

/**
 * Creates a Glorot-uniform head from `seed`.
 *
 * # Safety
 * `out` must be valid for a pointer write.
 */
enum FhStatus fh_head_new_random(uint32_t embedding_dim,
                                 uint32_t num_classes,
                                 uint64_t seed,
                                 struct FhHead **out);

/**
 * Releases a head. Null is ignored.
 *
 * # Safety
 * `head` must be null or a handle from this library not yet freed.
 */
void fh_head_free(struct FhHead *head);

/**
 * # Safety
 * `head` must be a live handle; `embedding_dim` and `num_classes` must be valid for writes.
 */
enum FhStatus fh_head_shape(const struct FhHead *head,
                            uint32_t *embedding_dim,
                            uint32_t *num_classes);

/**
 * Copies the flat parameters (weight rows by class, then bias) into `out`.
 *
 * # Safety
 * `head` must be a live handle; `out` must hold `out_len` floats.
 */
enum FhStatus fh_head_params(const struct FhHead *head, float *out, size_t out_len);

/**
 * Writes the `C` class probabilities for one embedding.
 *
 * # Safety
 * `head` must be a live handle; `x` must hold `x_len` floats and `probs` `probs_len`.
 */
enum FhStatus fh_head_forward(const struct FhHead *head,
                              const float *x,
                              size_t x_len,
                              float *probs,
                              size_t probs_len);

/**
 * Writes the predicted class (ties go to the lowest index).
 *
 * # Safety
 * `head` must be a live handle; `x` must hold `x_len` floats; `label` must be valid for a write.
 */
enum FhStatus fh_head_predict(const struct FhHead *head,
                              const float *x,
                              size_t x_len,
                              uint32_t *label);

/**
 * Runs `local_episodes` SGD steps on a batch of `n` samples.
 *
 * `features` is `n` embeddings back to back (`n * E` floats). On error the
 * head is left as it was before the failing step.
 *
 * # Safety
 * `head` must be a live handle not used concurrently; `features` must hold
 * `n * E` floats and `labels` `n` values.
 */
enum FhStatus fh_head_train_batch(struct FhHead *head,
                                  const float *features,
                                  const uint32_t *labels,
                                  size_t n,
                                  double learning_rate,
                                  uint32_t local_episodes);

/**
 * Encodes the head into `buf`. `written` receives the encoded size, also
 * when the call fails with `FH_STATUS_BUFFER_TOO_SMALL`.
 *
 * # Safety
 * `head` must be a live handle; `buf` must hold `cap` bytes; `written` must be valid for a write.
 */
enum FhStatus fh_head_encode(const struct FhHead *head, uint8_t *buf, size_t cap, size_t *written);

/**
 * As [`fh_head_encode`], producing the 8-byte-frame form.
 *
 * # Safety
 * Same as [`fh_head_encode`].
 */
enum FhStatus fh_head_encode_framed(const struct FhHead *head,
                                    uint8_t *buf,
                                    size_t cap,
                                    size_t *written);

/**
 * Decodes an encoded model into a new head.
 *
 * # Safety
 * `buf` must hold `len` bytes; `out` must be valid for a pointer write.
 */
enum FhStatus fh_head_decode(const uint8_t *buf, size_t len, struct FhHead **out);

/**
 * Decodes the 8-byte-frame form into a new head.
 *
 * # Safety
 * Same as [`fh_head_decode`].
 */
enum FhStatus fh_head_decode_framed(const uint8_t *buf, size_t len, struct FhHead **out);

/**
 * Element-wise mean of `n` heads of one shape, as a new head.
 *
 * # Safety
 * `heads` must hold `n` live handles; `out` must be valid for a pointer write.
 */
enum FhStatus fh_heads_average(const struct FhHead *const *heads, size_t n, struct FhHead **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDHEAD_H */

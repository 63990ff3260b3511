/* C interface to the bitsplit engine (generated by cbindgen). */

#ifndef BITSPLIT_H
#define BITSPLIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every `bs_*` call.
 */
typedef enum BsStatus {
  BsOk = 0,
  BsErrInvalidArgument = 1,
  BsErrInvalidState = 2,
  BsErrFormat = 3,
  BsErrIo = 4,
  BsErrNullPointer = 5,
  BsErrPanic = 6,
} BsStatus;

/**
 * Opaque handle to a loaded, compiled model.
 */
typedef struct BsModel BsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failing call on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *bs_last_error_message(void);

/**
 * Load a model file. Trainable-format files are folded and packed for
 * inference on load; compiled-format files load as-is. On success writes a
 * handle to `out`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` must be a valid
 * pointer. The returned handle must be released with `bs_model_free`.
 */
enum BsStatus bs_model_load(const char *path, struct BsModel **out);

/**
 * Release a handle obtained from `bs_model_load`. NULL is a no-op.
 *
 * # Safety
 * `model` must be a handle returned by `bs_model_load`, released at most once.
 */
enum BsStatus bs_model_free(struct BsModel *model);

/**
 * Number of output classes (logit count).
 *
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum BsStatus bs_model_num_classes(const struct BsModel *model, size_t *out);

/**
 * Flat input length when it is statically known (dense first layer);
 * writes 0 for convolutional models, whose spatial dims come from the
 * input itself.
 *
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum BsStatus bs_model_input_len(const struct BsModel *model, size_t *out);

/**
 * Activation (k) and weight (n) bit counts of the compiled model.
 *
 * # Safety
 * All pointers must be valid.
 */
enum BsStatus bs_model_bits(const struct BsModel *model, size_t *k_out, size_t *n_out);

/**
 * Run packed inference on one sample. `input` holds `input_len` f32
 * values (row-major image or flat features); logits are written to
 * `out_logits`, which must hold at least `num_classes` values.
 *
 * # Safety
 * `model`, `input`, and `out_logits` must be valid for the stated lengths.
 */
enum BsStatus bs_model_predict(const struct BsModel *model,
                               const float *input,
                               size_t input_len,
                               float *out_logits,
                               size_t logits_capacity);

/**
 * Class index with the highest logit for one sample.
 *
 * # Safety
 * `model`, `input`, and `out_class` must be valid for the stated lengths.
 */
enum BsStatus bs_model_classify(const struct BsModel *model,
                                const float *input,
                                size_t input_len,
                                size_t *out_class);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BITSPLIT_H */

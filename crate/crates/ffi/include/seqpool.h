#ifndef SEQPOOL_H
#define SEQPOOL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SqpStatus {
  SQP_STATUS_OK = 0,
  SQP_STATUS_NULL_POINTER = 1,
  SQP_STATUS_DIMENSION = 2,
  SQP_STATUS_DOMAIN = 3,
  SQP_STATUS_FORMAT = 4,
  SQP_STATUS_IO = 5,
  SQP_STATUS_CONFIG = 6,
  SQP_STATUS_PANIC = 7,
} SqpStatus;

typedef enum SqpArch {
  SQP_ARCH_RNN = 0,
  SQP_ARCH_FNN = 1,
} SqpArch;

/**
 * Sequence stage parameters plus the architecture that reads them.
 */
typedef struct SqpParams SqpParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sqp_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *sqp_last_error(void);

/**
 * Loads a checkpoint or a bare stage parameter record.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum SqpStatus sqp_params_load(const char *path, struct SqpParams **out);

/**
 * Random parameters with input size `d_in` and output size `d_out`.
 *
 * # Safety
 * `out` must be a writable pointer.
 */
enum SqpStatus sqp_params_new_random(size_t d_in,
                                     size_t d_out,
                                     enum SqpArch arch,
                                     uint64_t seed,
                                     struct SqpParams **out);

/**
 * Writes the bare stage parameter record.
 *
 * # Safety
 * `params` must come from this library; `path` must be NUL-terminated.
 */
enum SqpStatus sqp_params_save(const struct SqpParams *params, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `params` must come from this library and not be used afterwards.
 */
void sqp_params_free(struct SqpParams *params);

/**
 * Input size, output size and architecture of a handle.
 *
 * # Safety
 * All pointers must be valid.
 */
enum SqpStatus sqp_params_dims(const struct SqpParams *params,
                               size_t *d_in,
                               size_t *d_out,
                               enum SqpArch *arch);

/**
 * Switches the architecture that reads the parameters. Values are untouched.
 *
 * # Safety
 * `params` must come from this library.
 */
enum SqpStatus sqp_params_set_arch(struct SqpParams *params, enum SqpArch arch);

/**
 * Per-step stage outputs, dropout off. `frames` is `t * d_in` row-major,
 * `out` receives `t * d_out`.
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
enum SqpStatus sqp_stage_forward(const struct SqpParams *params,
                                 const double *frames,
                                 size_t t,
                                 double *out);

/**
 * Average-pooled descriptor of length `d_out`.
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
enum SqpStatus sqp_stage_descriptor(const struct SqpParams *params,
                                    const double *frames,
                                    size_t t,
                                    double *out);

/**
 * Euclidean gap between recurrent and feed-forward outputs: one value per
 * step in `per_step` (length `t`, may be null) and the pooled gap.
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
enum SqpStatus sqp_approx_error(const struct SqpParams *params,
                                const double *frames,
                                size_t t,
                                double *per_step,
                                double *pooled);

/**
 * CMC curve of `count` probes against `count` gallery rows of size `dim`,
 * where probe `i` matches gallery row `truth[i]`. `out` receives `count`
 * values.
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
enum SqpStatus sqp_cmc(const double *probes,
                       const double *gallery,
                       size_t count,
                       size_t dim,
                       const size_t *truth,
                       double *out);

/**
 * Copies checkpoint `input` to `output` with the architecture tag flipped.
 *
 * # Safety
 * Both paths must be NUL-terminated strings.
 */
enum SqpStatus sqp_checkpoint_transplant(const char *input, const char *output);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEQPOOL_H */

#ifndef INSP_H
#define INSP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every fallible function.
 */
typedef enum InspStatus {
  INSP_STATUS_OK = 0,
  INSP_STATUS_NULL_POINTER = 1,
  INSP_STATUS_INVALID_ARGUMENT = 2,
  INSP_STATUS_NUMERICAL = 3,
  INSP_STATUS_FORMAT = 4,
  INSP_STATUS_CAPABILITY = 5,
  INSP_STATUS_IO = 6,
  INSP_STATUS_BUFFER_TOO_SMALL = 7,
  INSP_STATUS_PANIC = 8,
} InspStatus;

/**
 * Opaque fitted network.
 */
typedef struct InspInr InspInr;

/**
 * Opaque derivative-stack operator.
 */
typedef struct InspOp InspOp;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message, NUL-terminated and
 * truncated to `len` bytes, into `buf`. Returns the full message length
 * excluding the terminator.
 *
 * # Safety
 * `buf` must be null or valid for writes of `len` bytes.
 */
size_t insp_last_error(char *buf, size_t len);

/**
 * Number of partial derivatives of order at most `order` in `m` variables.
 */
size_t insp_stack_len(size_t m, size_t order);

/**
 * Parses a network file held in memory.
 *
 * # Safety
 * `bytes` must be valid for reads of `len` bytes and `out` valid for a
 * pointer write.
 */
enum InspStatus insp_inr_load(const uint8_t *bytes, size_t len, struct InspInr **out);

/**
 * Reads a network file from disk.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for a pointer write.
 */
enum InspStatus insp_inr_load_file(const char *path, struct InspInr **out);

/**
 * Fits a network to `n` samples with `m` coordinates (row-major `n x m`,
 * in `[-1, 1]`) and `c` target channels (row-major `n x c`, in `[0, 1]`).
 *
 * # Safety
 * Pointers must be valid for the sizes implied by `n`, `m`, `c` and
 * `n_hidden`; `out` must be valid for a pointer write.
 */
enum InspStatus insp_inr_fit(const double *coords,
                             const double *targets,
                             size_t n,
                             size_t m,
                             size_t c,
                             const size_t *hidden,
                             size_t n_hidden,
                             size_t steps,
                             double lr,
                             uint64_t seed,
                             struct InspInr **out);

/**
 * Releases a network handle; null is ignored.
 *
 * # Safety
 * `inr` must be null or a handle from this library not yet freed.
 */
void insp_inr_free(struct InspInr *inr);

/**
 * Coordinate dimension, or 0 for a null handle.
 *
 * # Safety
 * `inr` must be null or a live handle.
 */
size_t insp_inr_input_dim(const struct InspInr *inr);

/**
 * Output channels, or 0 for a null handle.
 *
 * # Safety
 * `inr` must be null or a live handle.
 */
size_t insp_inr_output_dim(const struct InspInr *inr);

/**
 * Raw outputs at `n_points` coordinates into `out` (`n_points x c`).
 *
 * # Safety
 * `points` must hold `n_points * m` values and `out` `out_len` values.
 */
enum InspStatus insp_inr_forward(const struct InspInr *inr,
                                 const double *points,
                                 size_t n_points,
                                 double *out,
                                 size_t out_len);

/**
 * Every partial derivative up to `order` at one point, channel-major
 * (`c x insp_stack_len(m, order)`), in graded multi-index order.
 *
 * # Safety
 * `x` must hold `m` values and `out` `out_len` values.
 */
enum InspStatus insp_inr_derivatives(const struct InspInr *inr,
                                     const double *x,
                                     size_t order,
                                     double *out,
                                     size_t out_len);

/**
 * Serializes a network; the buffer is released with [`insp_bytes_free`].
 *
 * # Safety
 * `out` and `len` must be valid for writes.
 */
enum InspStatus insp_inr_save(const struct InspInr *inr, uint8_t **out, size_t *len);

/**
 * Releases a buffer returned by this library.
 *
 * # Safety
 * `bytes`/`len` must come from one earlier call, or `bytes` be null.
 */
void insp_bytes_free(uint8_t *bytes, size_t len);

/**
 * Parses an operator file held in memory.
 *
 * # Safety
 * `bytes` must be valid for reads of `len` bytes and `out` for a pointer
 * write.
 */
enum InspStatus insp_operator_load(const uint8_t *bytes, size_t len, struct InspOp **out);

/**
 * Built-in operator: `identity`, `edge` or `laplacian` on `m` coordinates.
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` valid for a pointer
 * write.
 */
enum InspStatus insp_operator_preset(const char *name, size_t m, struct InspOp **out);

/**
 * Releases an operator handle; null is ignored.
 *
 * # Safety
 * `op` must be null or a handle from this library not yet freed.
 */
void insp_operator_free(struct InspOp *op);

/**
 * Evaluates `op` applied to `inr` at `n_points` coordinates, writing
 * `n_points x channels` values.
 *
 * # Safety
 * `points` must hold `n_points * m` values and `out` `out_len` values.
 */
enum InspStatus insp_operator_apply(const struct InspOp *op,
                                    const struct InspInr *inr,
                                    const double *points,
                                    size_t n_points,
                                    double *out,
                                    size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INSP_H */

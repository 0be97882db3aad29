/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef PERMNM_H
#define PERMNM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum PnmStatus {
  PNM_STATUS_OK = 0,
  PNM_STATUS_NULL_POINTER = 1,
  PNM_STATUS_INVALID_ARGUMENT = 2,
  PNM_STATUS_DIMENSION = 3,
  PNM_STATUS_INVALID_PERMUTATION = 4,
  PNM_STATUS_NON_FINITE = 5,
  PNM_STATUS_NM_VIOLATION = 6,
  PNM_STATUS_TOO_LARGE = 7,
  PNM_STATUS_FORMAT = 8,
  PNM_STATUS_IO = 9,
  PNM_STATUS_DIVERGED = 10,
  PNM_STATUS_INTERNAL = 11,
  PNM_STATUS_PANIC = 12,
  PNM_STATUS_BUFFER_TOO_SMALL = 13,
} PnmStatus;

// Compressed N:M weight matrix.
typedef struct PnmCompressed PnmCompressed;

// Dense row-major `f64` matrix.
typedef struct PnmMatrix PnmMatrix;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *pnm_version(void);

// Static name of a status code, e.g. `"nm_violation"`.
const char *pnm_status_name(enum PnmStatus status);

// Copies the calling thread's last error message into `buf`.
//
// Returns the size needed including the terminator, or 0 if no error has
// been recorded. Nothing is written when `len` is too small.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t pnm_last_error_message(char *buf, size_t len);

// Creates a `rows × cols` matrix from row-major `data`.
//
// # Safety
// `data` must be valid for `rows * cols` reads; `out` must be writable.
enum PnmStatus pnm_matrix_new(size_t rows, size_t cols, const double *data, struct PnmMatrix **out);

// Releases a matrix. Null is ignored.
//
// # Safety
// `m` must come from this library and not be used afterwards.
void pnm_matrix_free(struct PnmMatrix *m);

// Writes the shape of `m`.
//
// # Safety
// `m` must be a live handle; `rows` and `cols` must be writable.
enum PnmStatus pnm_matrix_shape(const struct PnmMatrix *m, size_t *rows, size_t *cols);

// Copies the row-major contents of `m` into `out`, which holds `len` values.
//
// # Safety
// `m` must be a live handle; `out` must be valid for `len` writes.
enum PnmStatus pnm_matrix_copy(const struct PnmMatrix *m, double *out, size_t len);

// Soft permutation of square `logits` at temperature `tau` after
// `iterations` row/column normalization rounds.
//
// # Safety
// `logits` must be a live handle; `out` must be writable.
enum PnmStatus pnm_soft_permutation(const struct PnmMatrix *logits,
                                    double tau,
                                    size_t iterations,
                                    struct PnmMatrix **out);

// Permutation maximizing `Σⱼ m[perm[j], j]`. `perm` receives `n` indices.
//
// # Safety
// `m` must be a live square handle; `perm` must be valid for `len` writes;
// `objective` may be null.
enum PnmStatus pnm_solve_lsa(const struct PnmMatrix *m,
                             size_t *perm,
                             size_t len,
                             double *objective);

// Importance scores of `weight`: magnitude when `calibration` is null,
// Wanda (`|W|` times input column norms) otherwise.
//
// # Safety
// `weight` must be a live handle; `calibration` null or live; `out` writable.
enum PnmStatus pnm_importance_scores(const struct PnmMatrix *weight,
                                     const struct PnmMatrix *calibration,
                                     struct PnmMatrix **out);

// 0/1 mask pruning `n_zero` of every `group` columns of `scores`, keeping
// the largest (lower index on ties).
//
// # Safety
// `scores` must be a live handle; `out` must be writable.
enum PnmStatus pnm_nm_mask(const struct PnmMatrix *scores,
                           size_t n_zero,
                           size_t group,
                           struct PnmMatrix **out);

// Block-confined channel permutation from the score-maximizing heuristic.
// `perm` receives one index per column of `scores`.
//
// # Safety
// `scores` must be a live handle; `perm` must be valid for `len` writes.
enum PnmStatus pnm_heuristic_permutation(const struct PnmMatrix *scores,
                                         size_t n_zero,
                                         size_t group,
                                         size_t block_size,
                                         size_t *perm,
                                         size_t len);

// Number of ways to split `channels` into unordered groups of `group`,
// as a decimal string. Release with [`pnm_string_free`].
//
// # Safety
// `out` must be writable.
enum PnmStatus pnm_count_partitions(size_t channels, size_t group, char **out);

// Packs an N:M-valid weight matrix (values cast to `f32`).
//
// # Safety
// `weight` must be a live handle; `out` must be writable.
enum PnmStatus pnm_compress(const struct PnmMatrix *weight,
                            size_t n_zero,
                            size_t group,
                            struct PnmCompressed **out);

// Parses a serialized compressed stream.
//
// # Safety
// `bytes` must be valid for `len` reads; `out` must be writable.
enum PnmStatus pnm_compressed_from_bytes(const uint8_t *bytes,
                                         size_t len,
                                         struct PnmCompressed **out);

// Serializes `c` into `buf`. `written` always receives the size needed;
// the status is `BufferTooSmall` if `len` is short.
//
// # Safety
// `c` must be a live handle; `buf` valid for `len` writes; `written` writable.
enum PnmStatus pnm_compressed_to_bytes(const struct PnmCompressed *c,
                                       uint8_t *buf,
                                       size_t len,
                                       size_t *written);

// Expands `c` back to a dense matrix.
//
// # Safety
// `c` must be a live handle; `out` must be writable.
enum PnmStatus pnm_decompress(const struct PnmCompressed *c, struct PnmMatrix **out);

// Releases a compressed matrix. Null is ignored.
//
// # Safety
// `c` must come from this library and not be used afterwards.
void pnm_compressed_free(struct PnmCompressed *c);

// Runs the comparison command. `config_json` is a JSON object with at
// least `model` and `calib` paths; other fields override the defaults.
// `out` receives the report as JSON; release it with [`pnm_string_free`].
//
// # Safety
// `config_json` must be a NUL-terminated string; `out` must be writable.
enum PnmStatus pnm_compare(const char *config_json, char **out);

// Runs the prune command, writing artifacts under `out_dir`. `out`
// receives the report as JSON; release it with [`pnm_string_free`].
//
// # Safety
// Both strings must be NUL-terminated; `out` must be writable.
enum PnmStatus pnm_prune(const char *config_json, const char *out_dir, char **out);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be used afterwards.
void pnm_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PERMNM_H */

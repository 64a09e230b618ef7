#ifndef RAGCAP_H
#define RAGCAP_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum ragcap_status {
  RAGCAP_STATUS_OK = 0,
  RAGCAP_STATUS_NULL_POINTER = 1,
  RAGCAP_STATUS_DIM_MISMATCH = 2,
  RAGCAP_STATUS_ZERO_VECTOR = 3,
  RAGCAP_STATUS_NON_FINITE = 4,
  RAGCAP_STATUS_IO = 5,
  RAGCAP_STATUS_CORRUPT_HEADER = 6,
  RAGCAP_STATUS_COUNT_MISMATCH = 7,
  RAGCAP_STATUS_INVALID_DATA = 8,
  RAGCAP_STATUS_INVALID_ARGUMENT = 9,
  RAGCAP_STATUS_EMPTY_STORE = 10,
  RAGCAP_STATUS_DEGENERATE_SUM = 11,
  RAGCAP_STATUS_BUFFER_TOO_SMALL = 12,
  RAGCAP_STATUS_INTERNAL = 13,
} ragcap_status;

/**
 * Opaque caption store.
 */
typedef struct ragcap_store ragcap_store;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Load a store from `path` (binary file plus `<path>.tsv`).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum ragcap_status ragcap_store_load(const char *path, struct ragcap_store **out);

/**
 * Release a store. Null is ignored.
 *
 * # Safety
 * `store` must come from [`ragcap_store_load`] and must not be used afterwards.
 */
void ragcap_store_free(struct ragcap_store *store);

/**
 * # Safety
 * `store` must be a live handle; `out` must be writable.
 */
enum ragcap_status ragcap_store_len(const struct ragcap_store *store, size_t *out);

/**
 * # Safety
 * `store` must be a live handle; `out` must be writable.
 */
enum ragcap_status ragcap_store_dim(const struct ragcap_store *store, size_t *out);

/**
 * Caption text of entry `index`; release with [`ragcap_string_free`].
 *
 * # Safety
 * `store` must be a live handle; `out` must be writable.
 */
enum ragcap_status ragcap_store_entry_text(const struct ragcap_store *store,
                                           size_t index,
                                           char **out);

/**
 * Id of entry `index`; release with [`ragcap_string_free`].
 *
 * # Safety
 * `store` must be a live handle; `out` must be writable.
 */
enum ragcap_status ragcap_store_entry_id(const struct ragcap_store *store,
                                         size_t index,
                                         char **out);

/**
 * Release a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and must not be used afterwards.
 */
void ragcap_string_free(char *s);

/**
 * Cosine similarity of two `dim`-length vectors.
 *
 * # Safety
 * `a` and `b` must point to `dim` floats; `out` must be writable.
 */
enum ragcap_status ragcap_cosine(const float *a, const float *b, size_t dim, double *out);

/**
 * The `k` most similar entries, best first (ties by ascending id).
 *
 * `out_indices` (and `out_similarities`, which may be null) need room for
 * `capacity` values. `out_count` receives the number of hits even when it
 * exceeds `capacity`, in which case `BufferTooSmall` is returned.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum ragcap_status ragcap_retrieve_topk(const struct ragcap_store *store,
                                        const float *query,
                                        size_t dim,
                                        size_t k,
                                        size_t *out_indices,
                                        double *out_similarities,
                                        size_t capacity,
                                        size_t *out_count);

/**
 * Up to `k` entries with similarity in `[s_min, s_max]`, chosen uniformly
 * by `seed` when more qualify; output ordered as for top-k.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum ragcap_status ragcap_retrieve_in_range(const struct ragcap_store *store,
                                            const float *query,
                                            size_t dim,
                                            size_t k,
                                            double s_min,
                                            double s_max,
                                            uint64_t seed,
                                            size_t *out_indices,
                                            double *out_similarities,
                                            size_t capacity,
                                            size_t *out_count);

/**
 * Softmax-weighted combination of the support, written to `out` (`dim` floats).
 *
 * # Safety
 * `query` and `out` must point to `dim` floats.
 */
enum ragcap_status ragcap_project(const struct ragcap_store *support,
                                  const float *query,
                                  size_t dim,
                                  double temperature,
                                  bool renormalize,
                                  float *out);

/**
 * Message for the most recent failure on this thread, or null if the most
 * recent call succeeded. Valid until the next call into this library on the
 * same thread; do not free.
 */
const char *ragcap_last_error_message(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RAGCAP_H */

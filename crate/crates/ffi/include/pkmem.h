#ifndef PKMEM_H
#define PKMEM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PkmStatus {
  PKM_OK = 0,
  PKM_ERR_NULL = 1,
  PKM_ERR_DIMENSION = 2,
  PKM_ERR_INDEX = 3,
  PKM_ERR_CONFIG = 4,
  PKM_ERR_NUMERIC = 5,
  PKM_ERR_STATE = 6,
  PKM_ERR_PROTOCOL = 7,
  PKM_ERR_VERIFICATION = 8,
  PKM_ERR_IO = 9,
  PKM_ERR_PANIC = 10,
} PkmStatus;

/**
 * Product-key index over two half-key tables.
 */
typedef struct PkmIndex PkmIndex;

/**
 * A memory pool with one memory layer attached.
 */
typedef struct PkmMemory PkmMemory;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the next call.
 */
const char *pkm_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pkm_version(void);

/**
 * Creates an index of `half_n²` keys of width `key_dim` (even) from `seed`.
 *
 * # Safety
 * `out` must be a valid pointer to write the handle to.
 */
enum PkmStatus pkm_index_new(size_t half_n,
                             size_t key_dim,
                             bool qk_norm,
                             uint64_t seed,
                             struct PkmIndex **out);

/**
 * # Safety
 * `index` must come from [`pkm_index_new`] and not be used afterwards.
 */
void pkm_index_free(struct PkmIndex *index);

/**
 * Number of virtual keys (`half_n²`).
 *
 * # Safety
 * `index` must be a live handle, `out` writable.
 */
enum PkmStatus pkm_index_num_keys(const struct PkmIndex *index, size_t *out);

/**
 * Exact top-`k` keys for `query`; writes `k` indices and descending scores.
 *
 * # Safety
 * `query` holds `query_len` floats; `out_indices` and `out_scores` hold `k` slots.
 */
enum PkmStatus pkm_index_topk(const struct PkmIndex *index,
                              const float *query,
                              size_t query_len,
                              size_t k,
                              size_t *out_indices,
                              float *out_scores);

/**
 * Creates a pool of `half_n²` values of width `v_dim` and one layer on it.
 *
 * # Safety
 * `out` must be a valid pointer to write the handle to.
 */
enum PkmStatus pkm_memory_new(size_t half_n,
                              size_t key_dim,
                              size_t v_dim,
                              size_t model_dim,
                              size_t k,
                              bool gated,
                              bool qk_norm,
                              uint64_t seed,
                              struct PkmMemory **out);

/**
 * # Safety
 * `memory` must come from [`pkm_memory_new`] and not be used afterwards.
 */
void pkm_memory_free(struct PkmMemory *memory);

/**
 * Trainable parameters: pool plus the layer's own projections.
 *
 * # Safety
 * `memory` must be a live handle, `out` writable.
 */
enum PkmStatus pkm_memory_param_count(const struct PkmMemory *memory, size_t *out);

/**
 * Layer output for `tokens` row-major inputs of width `model_dim`.
 *
 * # Safety
 * `x` and `out` each hold `tokens·model_dim` floats.
 */
enum PkmStatus pkm_memory_forward(const struct PkmMemory *memory,
                                  const float *x,
                                  size_t tokens,
                                  size_t model_dim,
                                  float *out);

/**
 * Weighted bag sums: `out[b] = Σ_j weights[b·bag_size+j] · values[indices[b·bag_size+j]]`.
 *
 * # Safety
 * `values` holds `rows·dim` floats, `indices`/`weights` hold `bags·bag_size`
 * entries and `out` holds `bags·dim` floats.
 */
enum PkmStatus pkm_embedding_bag_forward(const float *values,
                                         size_t rows,
                                         size_t dim,
                                         const size_t *indices,
                                         const float *weights,
                                         size_t bags,
                                         size_t bag_size,
                                         float *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PKMEM_H */

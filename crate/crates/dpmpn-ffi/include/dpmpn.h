#ifndef DPMPN_H
#define DPMPN_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
enum DpmpnStatus
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  DPMPN_STATUS_OK = 0,
  DPMPN_STATUS_NULL_ARGUMENT = 1,
  DPMPN_STATUS_INVALID_UTF8 = 2,
  DPMPN_STATUS_IO = 3,
  DPMPN_STATUS_PARSE = 4,
  DPMPN_STATUS_CONFIG = 5,
  DPMPN_STATUS_GRAPH = 6,
  DPMPN_STATUS_SHAPE = 7,
  DPMPN_STATUS_NUMERIC = 8,
  DPMPN_STATUS_CHECKPOINT = 9,
  DPMPN_STATUS_PANIC = 99,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum DpmpnStatus DpmpnStatus;
#else
typedef int32_t DpmpnStatus;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

/**
 * Opaque configuration handle.
 */
typedef struct DpmpnConfig DpmpnConfig;

/**
 * Opaque dataset handle: vocabulary, splits and the built graph.
 */
typedef struct DpmpnDataset DpmpnDataset;

/**
 * Opaque model handle: parameters plus optimizer state.
 */
typedef struct DpmpnModel DpmpnModel;

/**
 * Aggregated ranking metrics.
 */
typedef struct DpmpnMetrics {
  double hits1;
  double hits3;
  double hits10;
  double mrr;
  uint64_t n_queries;
} DpmpnMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message on this thread into `buf` (truncated to
 * `len - 1` bytes, always NUL-terminated). Returns the full message
 * length in bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must point to `len` writable bytes, or be NULL (query mode).
 */
size_t dpmpn_last_error(char *buf, size_t len);

/**
 * Library version as a static string.
 */
const char *dpmpn_version(void);

/**
 * New configuration with default settings.
 */
struct DpmpnConfig *dpmpn_config_new(void);

/**
 * Apply a `key = value` configuration file.
 *
 * # Safety
 * `cfg` must be a live handle from [`dpmpn_config_new`]; `path` a valid
 * NUL-terminated string.
 */
DpmpnStatus dpmpn_config_load_file(struct DpmpnConfig *cfg, const char *path);

/**
 * Set one configuration key.
 *
 * # Safety
 * `cfg` must be a live handle; `key` and `value` valid strings.
 */
DpmpnStatus dpmpn_config_set(struct DpmpnConfig *cfg, const char *key, const char *value);

/**
 * # Safety
 * `cfg` must be NULL or a handle not freed before.
 */
void dpmpn_config_free(struct DpmpnConfig *cfg);

/**
 * Load the dataset named by the configuration's `train_path` /
 * `valid_path` / `test_path`. Returns NULL on failure.
 *
 * # Safety
 * `cfg` must be a live configuration handle.
 */
struct DpmpnDataset *dpmpn_dataset_load(const struct DpmpnConfig *cfg);

/**
 * # Safety
 * `ds` must be NULL or a handle not freed before.
 */
void dpmpn_dataset_free(struct DpmpnDataset *ds);

/**
 * # Safety
 * `ds` must be a live dataset handle.
 */
uint64_t dpmpn_dataset_n_entities(const struct DpmpnDataset *ds);

/**
 * Relation count after augmentation (inverse and self-loop included).
 *
 * # Safety
 * `ds` must be a live dataset handle.
 */
uint64_t dpmpn_dataset_n_relations(const struct DpmpnDataset *ds);

/**
 * # Safety
 * `ds` must be a live dataset handle.
 */
uint64_t dpmpn_dataset_n_edges(const struct DpmpnDataset *ds);

/**
 * Fresh model initialized from the configuration seed. NULL on failure.
 *
 * # Safety
 * `cfg` and `ds` must be live handles.
 */
struct DpmpnModel *dpmpn_model_new(const struct DpmpnConfig *cfg, const struct DpmpnDataset *ds);

/**
 * Load a checkpoint, validating its dimensions against the configuration
 * and dataset. NULL on failure.
 *
 * # Safety
 * `cfg` and `ds` must be live handles; `path` a valid string.
 */
struct DpmpnModel *dpmpn_model_load(const struct DpmpnConfig *cfg,
                                    const struct DpmpnDataset *ds,
                                    const char *path);

/**
 * Write the model to a checkpoint file.
 *
 * # Safety
 * `model` must be a live handle; `path` a valid string.
 */
DpmpnStatus dpmpn_model_save(const struct DpmpnModel *model, const char *path);

/**
 * # Safety
 * `model` must be NULL or a handle not freed before.
 */
void dpmpn_model_free(struct DpmpnModel *model);

/**
 * Run one training epoch; writes the epoch mean loss to `mean_loss_out`
 * when non-NULL.
 *
 * # Safety
 * `model`, `ds`, `cfg` must be live handles; `mean_loss_out` NULL or
 * writable.
 */
DpmpnStatus dpmpn_train_epoch(struct DpmpnModel *model,
                              const struct DpmpnDataset *ds,
                              const struct DpmpnConfig *cfg,
                              uint32_t epoch,
                              float *mean_loss_out);

/**
 * Filtered ranking metrics over a split ("train", "valid" or "test").
 *
 * # Safety
 * Handles must be live; `split` a valid string; `out` writable.
 */
DpmpnStatus dpmpn_evaluate(const struct DpmpnModel *model,
                           const struct DpmpnDataset *ds,
                           const struct DpmpnConfig *cfg,
                           const char *split,
                           struct DpmpnMetrics *out);

/**
 * Score a query and return its top-k predicted tails. `ids_out` and
 * `scores_out` must hold `k` elements; `n_out` receives how many were
 * written (fewer than `k` when the reached set is smaller).
 *
 * # Safety
 * Handles must be live; `head`/`rel` valid strings; output buffers must
 * hold at least `k` elements.
 */
DpmpnStatus dpmpn_predict_topk(const struct DpmpnModel *model,
                               const struct DpmpnDataset *ds,
                               const struct DpmpnConfig *cfg,
                               const char *head,
                               const char *rel,
                               size_t k,
                               uint64_t *ids_out,
                               float *scores_out,
                               size_t *n_out);

/**
 * Entity name for an id, written into `buf` (truncated, NUL-terminated).
 * Returns the full name length, or 0 for an out-of-range id.
 *
 * # Safety
 * `ds` must be a live handle; `buf` must point to `len` writable bytes.
 */
size_t dpmpn_entity_name(const struct DpmpnDataset *ds, uint64_t id, char *buf, size_t len);

/**
 * Run one query and write its attention subgraph as DOT to `path`.
 *
 * # Safety
 * Handles must be live; `head`, `rel` and `path` valid strings.
 */
DpmpnStatus dpmpn_export_dot(const struct DpmpnModel *model,
                             const struct DpmpnDataset *ds,
                             const struct DpmpnConfig *cfg,
                             const char *head,
                             const char *rel,
                             float threshold,
                             const char *path);

/**
 * Visited-subgraph size bound for the given horizons:
 * `1 + steps * min(from * per_node, to)`.
 */
uint64_t dpmpn_expansion_bound(uint64_t max_attending_from,
                               uint64_t max_sampling_per_node,
                               uint64_t max_attending_to,
                               uint64_t n_steps);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DPMPN_H */

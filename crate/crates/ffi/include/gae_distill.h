/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef GAE_DISTILL_H
#define GAE_DISTILL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GaeStatus {
  GAE_STATUS_OK = 0,
  // Invalid configuration or argument value.
  GAE_STATUS_CONFIG = 1,
  // Unreadable or malformed input files.
  GAE_STATUS_DATA = 2,
  // Non-finite values or shape errors during computation.
  GAE_STATUS_NUMERIC = 3,
  // A required pointer was null.
  GAE_STATUS_NULL_POINTER = 4,
  // A string argument was not valid UTF-8.
  GAE_STATUS_INVALID_UTF8 = 5,
  // Internal panic caught at the boundary.
  GAE_STATUS_PANIC = 6,
} GaeStatus;

// Opaque graph handle.
typedef struct GaeGraph GaeGraph;

// Opaque model handle.
typedef struct GaeModel GaeModel;

// Training hyperparameters; obtain defaults from
// [`gae_train_config_default`].
typedef struct GaeTrainConfig {
  double mask_ratio;
  double tau;
  double alpha;
  double gamma;
  // 0 = scaled cosine error, 1 = mean squared error.
  uint32_t loss_kind;
  double lr;
  uint64_t epochs;
  uint64_t seed;
  uint64_t hidden_dim;
  // Nonzero enables remasking of codes before decoding.
  uint32_t remask;
  double beta1;
  double beta2;
  double eps_adam;
  uint64_t track_similarity_every;
} GaeTrainConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the most recent failure on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *gae_last_error(void);

// Library version as a static NUL-terminated string.
const char *gae_version(void);

// Loads a dataset directory (`features.csv`, `graph.edges`, optional labels
// and splits).
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum GaeStatus gae_graph_load(const char *path, struct GaeGraph **out);

// Releases a graph; null is ignored.
//
// # Safety
// `g` must come from [`gae_graph_load`] and not be used afterwards.
void gae_graph_free(struct GaeGraph *g);

// Node count, directed edge count and feature width.
//
// # Safety
// `g` must be a live graph handle; output pointers may be null.
enum GaeStatus gae_graph_shape(const struct GaeGraph *g,
                               size_t *num_nodes,
                               size_t *num_edges,
                               size_t *feature_dim);

// Mean cosine similarity between neighbors of the raw features.
//
// # Safety
// `g` must be a live graph handle and `out` valid.
enum GaeStatus gae_graph_mean_similarity(const struct GaeGraph *g, double *out);

// Distillation penalty between the graph's features and a row-major
// `num_nodes × feature_dim` reconstruction.
//
// # Safety
// `recon` must point to `len` readable doubles.
enum GaeStatus gae_kl_distill(const struct GaeGraph *g,
                              const double *recon,
                              size_t len,
                              double tau,
                              double *out);

struct GaeTrainConfig gae_train_config_default(void);

// Trains a fresh model on `g`.
//
// # Safety
// `g` and `config` must be valid; `out` receives a new model handle.
enum GaeStatus gae_train(const struct GaeGraph *g,
                         const struct GaeTrainConfig *config,
                         struct GaeModel **out);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum GaeStatus gae_model_load(const char *path, struct GaeModel **out);

// # Safety
// `m` must be a live model handle and `path` a NUL-terminated string.
enum GaeStatus gae_model_save(const struct GaeModel *m, const char *path);

// Releases a model; null is ignored.
//
// # Safety
// `m` must come from this library and not be used afterwards.
void gae_model_free(struct GaeModel *m);

// # Safety
// `m` must be a live model handle; output pointers may be null.
enum GaeStatus gae_model_dims(const struct GaeModel *m, size_t *feature_dim, size_t *hidden_dim);

// Writes the `num_nodes × hidden_dim` encoder output (row-major) into `out`.
//
// # Safety
// `out` must point to `len` writable doubles.
enum GaeStatus gae_embed(const struct GaeModel *m,
                         const struct GaeGraph *g,
                         double *out,
                         size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GAE_DISTILL_H */

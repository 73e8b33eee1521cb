#ifndef EDGE_INFLUENCE_H
#define EDGE_INFLUENCE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EiEditKind {
  EI_EDIT_KIND_DELETE = 0,
  EI_EDIT_KIND_INSERT = 1,
} EiEditKind;

typedef enum EiMetric {
  EI_METRIC_VAL_LOSS = 0,
  EI_METRIC_DIRICHLET = 1,
  // Hop count equals the model depth.
  EI_METRIC_OVERSQUASH = 2,
} EiMetric;

typedef enum EiStatus {
  EI_STATUS_OK = 0,
  EI_STATUS_NULL_POINTER = 1,
  EI_STATUS_INVALID_UTF8 = 2,
  EI_STATUS_IO = 3,
  EI_STATUS_SCHEMA = 4,
  EI_STATUS_INVALID_EDIT = 5,
  EI_STATUS_CONFIG = 6,
  EI_STATUS_NUMERIC = 7,
  EI_STATUS_PANIC = 8,
} EiStatus;

// Opaque graph handle.
typedef struct EiGraph EiGraph;

// Opaque trained-model handle.
typedef struct EiModel EiModel;

typedef struct EiEdit {
  size_t u;
  size_t v;
  enum EiEditKind kind;
} EiEdit;

typedef struct EiSolverConfig {
  double damping;
  size_t max_iters;
  double tolerance;
} EiSolverConfig;

typedef struct EiInfluence {
  double param_shift;
  double msg_prop;
  double total;
} EiInfluence;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or NULL. Valid until
// the next call into this library from the same thread.
const char *ei_last_error_message(void);

// Static, NUL-terminated version string.
const char *ei_version(void);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum EiStatus ei_graph_load(const char *path, struct EiGraph **out);

// # Safety
// `json` must be a NUL-terminated string and `out` a valid pointer.
enum EiStatus ei_graph_from_json(const char *json, struct EiGraph **out);

// Barbell graph: two `clique`-cliques joined by a path of `bridge` edges.
//
// # Safety
// `out` must be a valid pointer.
enum EiStatus ei_graph_barbell(size_t clique, size_t bridge, uint64_t seed, struct EiGraph **out);

// Stochastic block model with `num_blocks` blocks of `block_size` nodes.
//
// # Safety
// `out` must be a valid pointer.
enum EiStatus ei_graph_sbm(size_t num_blocks,
                           size_t block_size,
                           double p_in,
                           double p_out,
                           uint64_t seed,
                           struct EiGraph **out);

// # Safety
// `graph` must be NULL or a handle from this library.
size_t ei_graph_num_nodes(const struct EiGraph *graph);

// # Safety
// `graph` must be NULL or a handle from this library.
size_t ei_graph_num_edges(const struct EiGraph *graph);

// # Safety
// `graph` must be NULL or a handle from this library, not yet freed.
void ei_graph_free(struct EiGraph *graph);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum EiStatus ei_model_load(const char *path, struct EiModel **out);

// Trains a GCN with full-batch gradient descent.
//
// # Safety
// `graph` must be a handle from this library and `out` a valid pointer.
enum EiStatus ei_model_train(const struct EiGraph *graph,
                             size_t layers,
                             size_t hidden,
                             size_t epochs,
                             double lr,
                             double weight_decay,
                             uint64_t seed,
                             struct EiModel **out);

// # Safety
// `model` must be a handle from this library, `path` a NUL-terminated string.
enum EiStatus ei_model_save(const struct EiModel *model, const char *path);

// # Safety
// `model` must be NULL or a handle from this library.
size_t ei_model_num_params(const struct EiModel *model);

// # Safety
// `model` must be NULL or a handle from this library, not yet freed.
void ei_model_free(struct EiModel *model);

// Evaluates `metric` for `model` on `graph`.
//
// # Safety
// Handles must come from this library and `out` must be valid.
enum EiStatus ei_metric_value(const struct EiGraph *graph,
                              const struct EiModel *model,
                              enum EiMetric metric,
                              double *out);

// Predicted change of `metric` for each of `n` edits, written to
// `out[0..n]`. `solver` may be NULL for the defaults.
//
// # Safety
// `edits` and `out` must each point to `n` elements; handles must come
// from this library.
enum EiStatus ei_influence(const struct EiGraph *graph,
                           const struct EiModel *model,
                           enum EiMetric metric,
                           const struct EiEdit *edits,
                           size_t n,
                           const struct EiSolverConfig *solver,
                           struct EiInfluence *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EDGE_INFLUENCE_H */

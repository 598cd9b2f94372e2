/* C interface to the lazygraph computation-graph engine. */

#ifndef LAZYGRAPH_H
#define LAZYGRAPH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status of one FFI call.
typedef enum LgStatus {
  LG_STATUS_OK = 0,
  LG_STATUS_NULL_ARGUMENT = 1,
  LG_STATUS_INVALID_UTF8 = 2,
  LG_STATUS_PARSE_ERROR = 3,
  LG_STATUS_INVALID_GRAPH = 4,
  LG_STATUS_SHAPE_ERROR = 5,
  LG_STATUS_PLAN_ERROR = 6,
  LG_STATUS_EVAL_ERROR = 7,
  LG_STATUS_PEBBLE_ERROR = 8,
  LG_STATUS_INTERNAL_PANIC = 9,
} LgStatus;

// Opaque graph handle: the graph plus its declared input shapes.
typedef struct LgGraph LgGraph;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the most recent failure on this thread, or null. The pointer
// stays valid until the next failing call on the same thread; do not free.
const char *lg_last_error(void);

// Frees a string returned by any `lg_*` out-parameter.
//
// # Safety
// `s` must be a pointer previously returned by this library and not yet
// freed; null is ignored.
void lg_string_free(char *s);

// Parses a graph from JSON (the CLI's graph format).
//
// # Safety
// `json` must be a valid NUL-terminated string and `out` a valid location to
// store the new handle. Free the handle with [`lg_graph_free`].
enum LgStatus lg_graph_from_json(const char *json_text, struct LgGraph **out);

// Releases a graph handle; null is ignored.
//
// # Safety
// `g` must come from [`lg_graph_from_json`] or [`lg_graph_optimise`] and not
// be used afterwards.
void lg_graph_free(struct LgGraph *g);

// Number of live nodes; 0 for a null handle.
//
// # Safety
// `g` must be a live handle or null.
uint64_t lg_graph_node_count(const struct LgGraph *g);

// Checks graph invariants. `Ok` when clean; `InvalidGraph` with one
// violation per line in `out_report` otherwise.
//
// # Safety
// `g` must be a live handle; `out_report` may be null when the caller only
// wants the status.
enum LgStatus lg_graph_validate(const struct LgGraph *g, char **out_report);

// Serialises the graph back to canonical JSON.
//
// # Safety
// `g` live handle, `out` valid location; free the string with
// [`lg_string_free`].
enum LgStatus lg_graph_to_json(const struct LgGraph *g, char **out);

// Renders the graph in DOT form.
//
// # Safety
// As [`lg_graph_to_json`].
enum LgStatus lg_graph_to_dot(const struct LgGraph *g, char **out);

// Rewrites the graph to fixpoint and returns a new handle; the input handle
// stays valid. `out_report` (optional) receives a JSON object with the
// rewrite counters.
//
// # Safety
// `g` live handle; `out` valid location; `out_report` may be null.
enum LgStatus lg_graph_optimise(const struct LgGraph *g, struct LgGraph **out, char **out_report);

// Infers shapes, orders the graph and returns the memory plan as JSON
// (`assignment`, `block_sizes`, `external`, `peak_bytes`).
//
// # Safety
// As [`lg_graph_to_json`].
enum LgStatus lg_graph_plan_json(const struct LgGraph *g, char **out);

// Plans and evaluates the graph. `inputs_json` (optional) is a JSON map of
// node id to tensor literal; outputs come back the same way.
//
// # Safety
// `g` live handle; `inputs_json` null or NUL-terminated; `out` valid.
enum LgStatus lg_graph_eval_json(const struct LgGraph *g, const char *inputs_json, char **out);

// Pebble-game Pareto frontier of the graph's topology as a JSON array of
// [space, time] pairs sorted by space. `time_cap` 0 uses the default bound.
//
// # Safety
// As [`lg_graph_to_json`].
enum LgStatus lg_graph_pebble_frontier(const struct LgGraph *g, uint32_t time_cap, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LAZYGRAPH_H */

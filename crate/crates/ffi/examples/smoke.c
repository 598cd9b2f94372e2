/* Minimal consumer of the C API: build with
 *
 *   cargo build -p lazygraph-ffi
 *   cc crates/ffi/examples/smoke.c -Icrates/ffi/include \
 *      target/debug/liblazygraph_ffi.a -lpthread -ldl -lm -o smoke
 */
#include <assert.h>
#include <stdio.h>

#include "lazygraph.h"

static const char *FIG1 =
    "{\"nodes\":["
    "{\"id\":0,\"op\":\"const\",\"preds\":[]},"
    "{\"id\":1,\"op\":\"var\",\"preds\":[]},"
    "{\"id\":2,\"op\":\"sub\",\"preds\":[0,1]},"
    "{\"id\":3,\"op\":\"var\",\"preds\":[]},"
    "{\"id\":4,\"op\":\"mul\",\"preds\":[2,3]},"
    "{\"id\":5,\"op\":\"sin\",\"preds\":[4]}],"
    "\"inputs\":[1,3],\"outputs\":[5],"
    "\"shapes\":{\"1\":[],\"3\":[]},"
    "\"values\":{\"0\":{\"shape\":[],\"data\":[2.0]}}}";

int main(void) {
  LgGraph *graph = NULL;
  if (lg_graph_from_json(FIG1, &graph) != LG_STATUS_OK) {
    fprintf(stderr, "parse: %s\n", lg_last_error());
    return 1;
  }
  assert(lg_graph_node_count(graph) == 6);
  assert(lg_graph_validate(graph, NULL) == LG_STATUS_OK);

  char *plan = NULL;
  if (lg_graph_plan_json(graph, &plan) != LG_STATUS_OK) {
    fprintf(stderr, "plan: %s\n", lg_last_error());
    return 1;
  }
  printf("plan: %s\n", plan);
  lg_string_free(plan);

  char *outputs = NULL;
  const char *inputs =
      "{\"1\":{\"shape\":[],\"data\":[1.0]},\"3\":{\"shape\":[],\"data\":[0.5]}}";
  if (lg_graph_eval_json(graph, inputs, &outputs) != LG_STATUS_OK) {
    fprintf(stderr, "eval: %s\n", lg_last_error());
    return 1;
  }
  printf("outputs: %s\n", outputs);
  lg_string_free(outputs);

  char *frontier = NULL;
  assert(lg_graph_pebble_frontier(graph, 0, &frontier) == LG_STATUS_OK);
  printf("pebble frontier: %s\n", frontier);
  lg_string_free(frontier);

  lg_graph_free(graph);
  return 0;
}

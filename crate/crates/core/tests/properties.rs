//! Property-level checks that back the per-module invariants: ordering,
//! broadcasting algebra, serialisation stability, oracle equality, inplace
//! safety and the planner-versus-oracle certification.

use std::collections::BTreeMap;
use std::time::Instant;

use proptest::prelude::*;

use lazygraph::eval::{eager_evaluate, evaluate, evaluate_with, DelayRegistry, EvalOptions};
use lazygraph::gen::random_graph;
use lazygraph::graph::{Graph, NodeId, OpKind};
use lazygraph::json::{graph_to_file, parse_graph_json, to_canonical_json};
use lazygraph::optimiser::optimise;
use lazygraph::pebble::{certify_plan_space, PebbleError};
use lazygraph::planner::plan;
use lazygraph::shape::{broadcast_shape, infer_shapes, Shape};
use lazygraph::tensor::{approx_eq, Tensor};

#[test]
fn topological_order_respects_every_edge() {
    for seed in 0..1000u64 {
        let outcome = random_graph(seed, 50);
        let graph = &outcome.graph;
        assert!(graph.validate().is_empty(), "legal construction always validates (seed {seed})");
        let order = graph.topological_order().unwrap();
        assert_eq!(order.len(), graph.node_count());
        for node in graph.nodes() {
            let r = order.rank(node.id).unwrap();
            for &p in &node.preds {
                assert!(
                    order.rank(p).unwrap() < r,
                    "seed {seed}: edge {p} -> {} breaks the ordering",
                    node.id
                );
            }
        }
    }
}

#[test]
fn inference_is_deterministic_and_total() {
    for seed in 0..100u64 {
        let outcome = random_graph(seed, 40);
        let a = infer_shapes(&outcome.graph, &outcome.input_shapes).unwrap();
        let b = infer_shapes(&outcome.graph, &outcome.input_shapes).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), outcome.graph.node_count(), "every node receives exactly one shape");
    }
}

#[test]
fn json_round_trip_is_byte_stable() {
    for seed in 0..50u64 {
        let outcome = random_graph(seed, 30);
        let mut graph = outcome.graph;
        for (id, t) in &outcome.input_values {
            graph.set_value(*id, t.clone()).unwrap();
        }
        let first = to_canonical_json(&graph_to_file(&graph, &outcome.input_shapes)).unwrap();
        let (reloaded, hints) = parse_graph_json(&first).unwrap();
        let second = to_canonical_json(&graph_to_file(&reloaded, &hints)).unwrap();
        assert_eq!(first, second, "seed {seed}");
    }
}

#[test]
fn planned_evaluation_matches_eager_exactly() {
    for seed in 3000..3100u64 {
        let outcome = random_graph(seed, 40);
        let graph = &outcome.graph;
        let table = infer_shapes(graph, &outcome.input_shapes).unwrap();
        let order = graph.topological_order().unwrap();
        let p = plan(graph, &order, &table.sizes()).unwrap();
        let blocked = evaluate(graph, &p, &outcome.input_values).unwrap();
        let eager = eager_evaluate(graph, &outcome.input_values).unwrap();
        for &out in graph.outputs() {
            assert!(
                approx_eq(&blocked[&out], &eager[&out], 1e-12),
                "seed {seed}, output {out}"
            );
        }
    }
}

#[test]
fn broadcast_hazard_never_aliases() {
    // the dying predecessor is smaller than the result; writing into its
    // block while broadcasting from it would corrupt the tail
    let mut g = Graph::new();
    let x = g.add_var().unwrap();
    let small = g.add_node(OpKind::Neg, vec![x]).unwrap();
    let y = g.add_var().unwrap();
    let wide = g.add_node(OpKind::Add, vec![small, y]).unwrap();
    g.set_inputs(vec![x, y]).unwrap();
    g.set_outputs(vec![wide]).unwrap();

    let mut inputs = BTreeMap::new();
    inputs.insert(x, Tensor::new(Shape::of(&[1, 3]), vec![1.0, 2.0, 3.0]).unwrap());
    inputs.insert(y, Tensor::new(Shape::of(&[4, 3]), (0..12).map(f64::from).collect()).unwrap());
    let hints: BTreeMap<NodeId, Shape> =
        inputs.iter().map(|(&id, t)| (id, t.shape().clone())).collect();

    let table = infer_shapes(&g, &hints).unwrap();
    let order = g.topological_order().unwrap();
    let p = plan(&g, &order, &table.sizes()).unwrap();
    assert_ne!(
        p.assignment[&wide], p.assignment[&small],
        "a broadcasting consumer must not overwrite its smaller parent"
    );
    let got = evaluate_with(
        &g,
        &p,
        &inputs,
        &DelayRegistry::default(),
        &EvalOptions { poison_freed: true },
    )
    .unwrap();
    let eager = eager_evaluate(&g, &inputs).unwrap();
    assert!(approx_eq(&got[&wide], &eager[&wide], 1e-12));
}

#[test]
fn optimise_never_touches_keep_nodes() {
    for seed in 4000..4100u64 {
        let outcome = random_graph(seed, 35);
        let graph = &outcome.graph;
        let table = infer_shapes(graph, &outcome.input_shapes).unwrap();
        let (optimised, _) = optimise(graph, &table).unwrap();
        for &out in graph.outputs() {
            assert!(optimised.get(out).is_some(), "seed {seed}: output {out} deleted");
            assert!(optimised.is_output(out));
        }
    }

    // update endpoints survive even when the whole expression is constant
    let mut g = Graph::new();
    let v = g.add_var().unwrap();
    let c = g.add_const(Tensor::scalar(4.0)).unwrap();
    let s = g.add_node(OpKind::Sqrt, vec![c]).unwrap();
    g.set_inputs(vec![v]).unwrap();
    g.set_outputs(vec![s]).unwrap();
    g.add_iopair(s, v).unwrap();
    let hints: BTreeMap<NodeId, Shape> = [(v, Shape::scalar())].into_iter().collect();
    let table = infer_shapes(&g, &hints).unwrap();
    let (g2, _) = optimise(&g, &table).unwrap();
    assert!(g2.get(s).is_some());
    assert!(g2.get(v).is_some(), "iopair target survives");
    assert_eq!(g2.iopairs(), &[(s, v)]);
    // the source was folded in place, so its value is ready for the update
    assert_eq!(g2.get(s).unwrap().op, OpKind::Const);
}

#[test]
fn ten_thousand_node_chain_plans_fast_into_one_block() {
    let mut g = Graph::new();
    let v = g.add_var().unwrap();
    let mut prev = v;
    for _ in 0..10_000 {
        prev = g.add_node(OpKind::Sin, vec![prev]).unwrap();
    }
    g.set_inputs(vec![v]).unwrap();
    g.set_outputs(vec![prev]).unwrap();
    let hints: BTreeMap<NodeId, Shape> = [(v, Shape::of(&[8]))].into_iter().collect();
    let table = infer_shapes(&g, &hints).unwrap();
    let order = g.topological_order().unwrap();
    let start = Instant::now();
    let p = plan(&g, &order, &table.sizes()).unwrap();
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    assert_eq!(p.pool_block_count(), 1);
}

fn hinted_plan(g: &Graph, hints: &BTreeMap<NodeId, Shape>) -> (lazygraph::AllocationPlan, BTreeMap<NodeId, u64>) {
    let table = infer_shapes(g, hints).unwrap();
    let order = g.topological_order().unwrap();
    let sizes = table.sizes();
    (plan(g, &order, &sizes).unwrap(), sizes)
}

#[test]
fn certification_against_the_exact_oracle() {
    // six-node example: 1 pool block + 3 externals vs an oracle that may
    // drop input pebbles once consumed
    let mut g = Graph::new();
    let c = g.add_const(Tensor::scalar(2.0)).unwrap();
    let x1 = g.add_var().unwrap();
    let x2 = g.add_node(OpKind::Sub, vec![c, x1]).unwrap();
    let x3 = g.add_var().unwrap();
    let x4 = g.add_node(OpKind::Mul, vec![x2, x3]).unwrap();
    let x5 = g.add_node(OpKind::Sin, vec![x4]).unwrap();
    g.set_inputs(vec![x1, x3]).unwrap();
    g.set_outputs(vec![x5]).unwrap();
    let hints: BTreeMap<NodeId, Shape> =
        [(x1, Shape::scalar()), (x3, Shape::scalar())].into_iter().collect();
    let (p, sizes) = hinted_plan(&g, &hints);
    let report = certify_plan_space(&g, &p, &sizes).unwrap();
    assert_eq!(report.pool_blocks, 1);
    assert_eq!(report.external_slots, 3);
    assert_eq!(report.planner_pebbles, 4);
    assert_eq!(report.oracle_min_space, 2);
    assert_eq!(report.minimal_time, 6);
    assert_eq!(report.gap, 2);
    assert!(!report.mapping.is_empty());

    // chain of five: 1 pool block + 1 external; the oracle slides a single
    // pebble down the chain
    let mut g = Graph::new();
    let v = g.add_var().unwrap();
    let mut prev = v;
    for _ in 0..4 {
        prev = g.add_node(OpKind::Sin, vec![prev]).unwrap();
    }
    g.set_inputs(vec![v]).unwrap();
    g.set_outputs(vec![prev]).unwrap();
    let hints: BTreeMap<NodeId, Shape> = [(v, Shape::scalar())].into_iter().collect();
    let (p, sizes) = hinted_plan(&g, &hints);
    let report = certify_plan_space(&g, &p, &sizes).unwrap();
    assert_eq!(report.planner_pebbles, 2);
    assert_eq!((report.oracle_min_space, report.minimal_time), (1, 5));
    assert_eq!(report.gap, 1);

    // tradeoff topology as an engine graph: the planner cannot drop the
    // still-needed intermediate either, but keeps both inputs as well
    let mut g = Graph::new();
    let v0 = g.add_var().unwrap();
    let n1 = g.add_node(OpKind::Sin, vec![v0]).unwrap();
    let n2 = g.add_node(OpKind::Exp, vec![n1]).unwrap();
    let v3 = g.add_var().unwrap();
    let n4 = g.add_node(OpKind::Add, vec![n2, v3]).unwrap();
    let n5 = g.add_node(OpKind::Mul, vec![n1, n4]).unwrap();
    g.set_inputs(vec![v0, v3]).unwrap();
    g.set_outputs(vec![n5]).unwrap();
    let hints: BTreeMap<NodeId, Shape> =
        [(v0, Shape::scalar()), (v3, Shape::scalar())].into_iter().collect();
    let (p, sizes) = hinted_plan(&g, &hints);
    let report = certify_plan_space(&g, &p, &sizes).unwrap();
    assert_eq!(report.oracle_min_space, 3);
    assert_eq!(report.minimal_time, 6);
    assert!(report.planner_pebbles >= report.oracle_min_space);
    assert_eq!(report.planner_pebbles, 4);

    // non-uniform sizes are rejected
    let mut g = Graph::new();
    let a = g.add_var().unwrap();
    let r = g.add_node(OpKind::Sum { axis: None }, vec![a]).unwrap();
    g.set_inputs(vec![a]).unwrap();
    g.set_outputs(vec![r]).unwrap();
    let hints: BTreeMap<NodeId, Shape> = [(a, Shape::of(&[4]))].into_iter().collect();
    let (p, sizes) = hinted_plan(&g, &hints);
    assert!(matches!(
        certify_plan_space(&g, &p, &sizes),
        Err(PebbleError::NonUniformSizes)
    ));
}

proptest! {
    #[test]
    fn broadcast_is_commutative(a in shape_strategy(), b in shape_strategy()) {
        let ab = broadcast_shape(&a, &b);
        let ba = broadcast_shape(&b, &a);
        match (ab, ba) {
            (Ok(x), Ok(y)) => prop_assert_eq!(x, y),
            (Err(_), Err(_)) => {}
            (x, y) => prop_assert!(false, "asymmetric outcome: {:?} vs {:?}", x, y),
        }
    }

    #[test]
    fn broadcast_is_associative_on_compatible_triples(
        a in shape_strategy(),
        b in shape_strategy(),
        c in shape_strategy(),
    ) {
        let left = broadcast_shape(&a, &b).and_then(|ab| broadcast_shape(&ab, &c));
        let right = broadcast_shape(&b, &c).and_then(|bc| broadcast_shape(&a, &bc));
        if let (Ok(x), Ok(y)) = (left, right) {
            prop_assert_eq!(x, y);
        }
    }
}

fn shape_strategy() -> impl Strategy<Value = Shape> {
    prop::collection::vec(prop_oneof![Just(1usize), 2usize..5], 0..4)
        .prop_map(|dims| Shape::new(dims).unwrap())
}

#[test]
fn frozen_graphs_and_plans_are_shareable() {
    fn assert_send_sync<T: Send + Sync>() {}
    assert_send_sync::<Graph>();
    assert_send_sync::<lazygraph::AllocationPlan>();
    assert_send_sync::<DelayRegistry>();

    // read-only traversal of a frozen graph from two threads
    let mut g = Graph::new();
    let v = g.add_var().unwrap();
    let s = g.add_node(OpKind::Sin, vec![v]).unwrap();
    g.set_inputs(vec![v]).unwrap();
    g.set_outputs(vec![s]).unwrap();
    g.set_value(v, Tensor::scalar(0.25)).unwrap();
    g.freeze().unwrap();
    let g = std::sync::Arc::new(g);
    let handles: Vec<_> = (0..2)
        .map(|_| {
            let g = g.clone();
            std::thread::spawn(move || {
                let order = g.topological_order().unwrap();
                let table = infer_shapes(&g, &BTreeMap::new()).unwrap();
                let p = plan(&g, &order, &table.sizes()).unwrap();
                evaluate(&g, &p, &BTreeMap::new()).unwrap()[&s].data()[0]
            })
        })
        .collect();
    for h in handles {
        assert_eq!(h.join().unwrap(), 0.25f64.sin());
    }
}

//! Deterministic random graphs for tests, benchmarks and seeded CLI runs.
//!
//! The generator tracks a concrete value for every node it creates (drawn
//! through the same kernels the engine uses) and rejects candidates whose
//! values go non-finite or explode, so generated graphs always evaluate to
//! tame numbers on the returned inputs. Outputs are the sink nodes, which
//! keeps every node reachable.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::{eval_node_value, DelayRegistry};
use crate::graph::{Graph, NodeId, OpKind};
use crate::shape::{broadcast_shape, Shape};
use crate::tensor::Tensor;

pub struct GenOutcome {
    pub graph: Graph,
    /// Declared shapes for every var (the `infer_shapes` hint map).
    pub input_shapes: BTreeMap<NodeId, Shape>,
    /// Matching input values, finite and moderate.
    pub input_values: BTreeMap<NodeId, Tensor>,
}

const MAX_NUMEL: usize = 512;
const MAX_MAGNITUDE: f64 = 1e9;

fn rand_shape(rng: &mut ChaCha8Rng) -> Shape {
    let rank = rng.gen_range(0..=2);
    Shape::new((0..rank).map(|_| rng.gen_range(1..=4)).collect()).expect("extents are positive")
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &Shape, lo: f64, hi: f64) -> Tensor {
    let data = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.clone(), data).expect("sized by the shape")
}

fn acceptable(t: &Tensor) -> bool {
    t.numel() <= MAX_NUMEL && t.data().iter().all(|x| x.is_finite() && x.abs() <= MAX_MAGNITUDE)
}

fn random_factorization(numel: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut dims = Vec::new();
    let mut m = numel;
    for _ in 0..rng.gen_range(0..=2usize) {
        let divisors: Vec<usize> = (1..=m).filter(|d| m % d == 0).collect();
        let d = divisors[rng.gen_range(0..divisors.len())];
        dims.push(d);
        m /= d;
    }
    dims.push(m);
    dims
}

/// Builds a valid random graph of roughly `node_budget` nodes.
pub fn random_graph(seed: u64, node_budget: usize) -> GenOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let registry = DelayRegistry::default();
    let mut graph = Graph::new();
    let mut values: BTreeMap<NodeId, Tensor> = BTreeMap::new();
    let mut input_shapes = BTreeMap::new();
    let mut input_values = BTreeMap::new();
    let mut live: Vec<NodeId> = Vec::new();

    let add_var = |graph: &mut Graph,
                       rng: &mut ChaCha8Rng,
                       shape: Shape,
                       values: &mut BTreeMap<NodeId, Tensor>,
                       input_shapes: &mut BTreeMap<NodeId, Shape>,
                       input_values: &mut BTreeMap<NodeId, Tensor>,
                       live: &mut Vec<NodeId>|
     -> NodeId {
        let t = rand_tensor(rng, &shape, 0.5, 2.0);
        let id = graph.add_var().expect("fresh graph is mutable");
        input_shapes.insert(id, shape);
        input_values.insert(id, t.clone());
        values.insert(id, t);
        live.push(id);
        id
    };

    for _ in 0..rng.gen_range(2..=4usize) {
        let shape = rand_shape(&mut rng);
        add_var(
            &mut graph,
            &mut rng,
            shape,
            &mut values,
            &mut input_shapes,
            &mut input_values,
            &mut live,
        );
    }
    for _ in 0..rng.gen_range(1..=2usize) {
        let shape = rand_shape(&mut rng);
        let sign = if rng.gen_bool(0.3) { -1.0 } else { 1.0 };
        let t = rand_tensor(&mut rng, &shape, 0.5, 2.0).map(|x| x * sign);
        let id = graph.add_const(t.clone()).expect("fresh graph is mutable");
        values.insert(id, t);
        live.push(id);
    }

    // Bias picks towards recent nodes so chains get deep, not just wide.
    let pick = |rng: &mut ChaCha8Rng, live: &[NodeId]| -> NodeId {
        if live.len() > 15 && rng.gen_bool(0.5) {
            live[rng.gen_range(live.len() - 15..live.len())]
        } else {
            live[rng.gen_range(0..live.len())]
        }
    };

    while graph.node_count() < node_budget {
        let mut candidate: Option<(OpKind, Vec<NodeId>)> = None;
        for _attempt in 0..8 {
            let roll = rng.gen_range(0..100u32);
            let trial: Option<(OpKind, Vec<NodeId>)> = if roll < 28 {
                let op = match rng.gen_range(0..5u32) {
                    0 => OpKind::Add,
                    1 => OpKind::Sub,
                    2 => OpKind::Mul,
                    3 => OpKind::Div,
                    _ => OpKind::Pow,
                };
                let a = pick(&mut rng, &live);
                let mut b = a;
                for _ in 0..6 {
                    let c = pick(&mut rng, &live);
                    if broadcast_shape(values[&a].shape(), values[&c].shape()).is_ok() {
                        b = c;
                        break;
                    }
                }
                Some((op, vec![a, b]))
            } else if roll < 53 {
                let op = match rng.gen_range(0..5u32) {
                    0 => OpKind::Neg,
                    1 => OpKind::Sin,
                    2 => OpKind::Cos,
                    3 => OpKind::Exp,
                    _ => OpKind::Sqrt,
                };
                Some((op, vec![pick(&mut rng, &live)]))
            } else if roll < 63 {
                let value = rng.gen_range(-1.5..1.5);
                let op = if rng.gen_bool(0.5) {
                    OpKind::ScalarAdd { value }
                } else {
                    OpKind::ScalarMul { value }
                };
                Some((op, vec![pick(&mut rng, &live)]))
            } else if roll < 71 {
                let a = pick(&mut rng, &live);
                let b = pick(&mut rng, &live);
                let c = pick(&mut rng, &live);
                Some((OpKind::Fma, vec![a, b, c]))
            } else if roll < 78 {
                let a = pick(&mut rng, &live);
                let rank = values[&a].shape().rank();
                let axis = if rank == 0 || rng.gen_bool(0.4) {
                    None
                } else {
                    Some(rng.gen_range(0..rank))
                };
                Some((OpKind::Sum { axis }, vec![a]))
            } else if roll < 84 {
                // matmul: find or make compatible 2-D operands
                let mut found = None;
                for _ in 0..8 {
                    let a = pick(&mut rng, &live);
                    if values[&a].shape().rank() == 2 {
                        found = Some(a);
                        break;
                    }
                }
                found.map(|a| {
                    let k = values[&a].shape().dims()[1];
                    let mut b = None;
                    for _ in 0..8 {
                        let c = pick(&mut rng, &live);
                        let s = values[&c].shape();
                        if s.rank() == 2 && s.dims()[0] == k {
                            b = Some(c);
                            break;
                        }
                    }
                    let b = b.unwrap_or_else(|| {
                        let n = rng.gen_range(1..=4);
                        add_var(
                            &mut graph,
                            &mut rng,
                            Shape::of(&[k, n]),
                            &mut values,
                            &mut input_shapes,
                            &mut input_values,
                            &mut live,
                        )
                    });
                    (OpKind::MatMul, vec![a, b])
                })
            } else if roll < 90 {
                let a = pick(&mut rng, &live);
                let dims = random_factorization(values[&a].numel(), &mut rng);
                Shape::new(dims).ok().map(|target| (OpKind::Reshape { target }, vec![a]))
            } else if roll < 95 {
                let a = pick(&mut rng, &live);
                let rank = values[&a].shape().rank();
                (rank > 0).then(|| {
                    let axis = rng.gen_range(0..rank);
                    let count = rng.gen_range(2..=3);
                    (OpKind::Repeat { axis, count }, vec![a])
                })
            } else if roll < 98 {
                let grad = pick(&mut rng, &live);
                let mut state = grad;
                for _ in 0..6 {
                    let c = pick(&mut rng, &live);
                    let b = broadcast_shape(values[&grad].shape(), values[&c].shape());
                    if b.ok().as_ref() == Some(values[&grad].shape()) {
                        state = c;
                        break;
                    }
                }
                let lr = rng.gen_range(0.01..0.5);
                let eps = rng.gen_range(1e-8..1e-2);
                Some((OpKind::FusedAdagrad { lr, eps }, vec![grad, state]))
            } else {
                let shape = rand_shape(&mut rng);
                let t = rand_tensor(&mut rng, &shape, 0.5, 2.0);
                let id = graph.add_const(t.clone()).expect("mutable");
                values.insert(id, t);
                live.push(id);
                break; // const added directly; no kernel check needed
            };

            if let Some((op, preds)) = trial {
                let ins: Vec<&Tensor> = preds.iter().map(|p| &values[p]).collect();
                let prospective = NodeId(graph.id_bound());
                if let Ok(v) = eval_node_value(prospective, &op, &ins, &registry) {
                    if acceptable(&v) {
                        candidate = Some((op, preds));
                        values.insert(prospective, v);
                        break;
                    }
                }
            }
        }
        if let Some((op, preds)) = candidate {
            let id = graph.add_node(op, preds).expect("candidate was checked");
            live.push(id);
        }
        // a failed round just rerolls; the const arm above always progresses
    }

    let counts = graph.consumer_counts();
    let sinks: Vec<NodeId> =
        graph.nodes().filter(|n| counts[&n.id] == 0).map(|n| n.id).collect();
    let inputs: Vec<NodeId> = input_shapes.keys().copied().collect();
    graph.set_inputs(inputs).unwrap();
    graph.set_outputs(sinks).unwrap();
    GenOutcome { graph, input_shapes, input_values }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::eager_evaluate;

    #[test]
    fn generated_graphs_validate_and_evaluate() {
        for seed in 0..25 {
            let out = random_graph(seed, 30);
            let violations = out.graph.validate();
            assert!(violations.is_empty(), "seed {seed}: {violations:?}");
            let values = eager_evaluate(&out.graph, &out.input_values)
                .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
            for (id, t) in &values {
                assert!(t.is_all_finite(), "seed {seed}, node {id} not finite");
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = random_graph(42, 40);
        let b = random_graph(42, 40);
        assert_eq!(a.graph.node_count(), b.graph.node_count());
        assert_eq!(a.graph.to_dot(), b.graph.to_dot());
        assert_eq!(a.input_values, b.input_values);
    }
}

//! Graph rewrites applied before planning and evaluation: identity
//! elimination, constant folding, AdaGrad fusion and FMA fusion.
//!
//! Every rewrite keeps node ids stable: a pattern's root is replaced in
//! place and absorbed nodes are deleted, so edges never point from a lower id
//! to a higher one and the shape table computed for the input graph stays
//! valid for every surviving node. Outputs and update-pair endpoints are
//! never deleted; fusion additionally requires interior nodes to have a
//! single consumer, since fusing a shared node would duplicate work.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::eval::{eager_closure, DelayRegistry, EvalError};
use crate::graph::{Graph, NodeId, OpKind};
use crate::shape::{broadcast_shape, infer_op, Shape, ShapeTable};
use crate::tensor::Tensor;

/// What one pass (or the whole pipeline) changed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RewriteReport {
    pub pass: &'static str,
    /// Nodes deleted, including nodes absorbed into fused replacements.
    pub nodes_removed: usize,
    /// Fused nodes created.
    pub nodes_fused: usize,
    /// Constant subgraphs collapsed into a single const.
    pub constants_folded: usize,
    /// Total rewrite applications, counting pure edge redirects that do not
    /// change the node count.
    pub rewrites: usize,
}

impl RewriteReport {
    fn new(pass: &'static str) -> Self {
        RewriteReport { pass, nodes_removed: 0, nodes_fused: 0, constants_folded: 0, rewrites: 0 }
    }

    pub fn changed(&self) -> bool {
        self.nodes_removed > 0 || self.nodes_fused > 0 || self.constants_folded > 0 || self.rewrites > 0
    }

    fn absorb(&mut self, other: &RewriteReport) {
        self.nodes_removed += other.nodes_removed;
        self.nodes_fused += other.nodes_fused;
        self.constants_folded += other.constants_folded;
        self.rewrites += other.rewrites;
    }
}

#[derive(Debug, Error)]
pub enum OptimiseError {
    #[error("constant folding failed: {source}")]
    Fold {
        #[source]
        source: EvalError,
    },
    #[error("constant folding at node {node} produced a non-finite value")]
    FoldNonFinite { node: NodeId },
}

fn const_all(g: &Graph, id: NodeId, v: f64) -> bool {
    matches!(g.get(id), Some(n) if n.op == OpKind::Const
        && n.value.as_ref().is_some_and(|t| t.data().iter().all(|&x| x == v)))
}

fn const_scalar(g: &Graph, id: NodeId) -> Option<f64> {
    let n = g.get(id)?;
    if n.op != OpKind::Const {
        return None;
    }
    let v = n.value.as_ref()?;
    (v.numel() == 1).then(|| v.data()[0])
}

/// Deletes nodes that have no consumers and are neither outputs nor update
/// endpoints, cascading to their predecessors. Pruned vars leave the inputs
/// list as well.
fn prune_dangling(g: &mut Graph) -> usize {
    let mut removed = 0;
    loop {
        let counts = g.consumer_counts();
        let dead: Vec<NodeId> = g
            .nodes()
            .filter(|n| counts[&n.id] == 0 && !g.is_output(n.id) && !g.is_iopair_endpoint(n.id))
            .map(|n| n.id)
            .collect();
        if dead.is_empty() {
            return removed;
        }
        for id in dead {
            g.remove_node(id);
            removed += 1;
        }
    }
}

/// Removes useless arithmetic to fixpoint: `x+0`, `x-0`, `x*1`, `x/1` (and
/// their scalar-parameter forms) collapse to `x`; `x*0` becomes a zero
/// constant of the result shape; a `Repeat` feeding a broadcasting pointwise
/// operation is bypassed when broadcasting already covers it. Redirects only
/// happen when the replacement has the node's inferred shape.
pub fn simplify_identities(graph: &Graph, shapes: &ShapeTable) -> (Graph, RewriteReport) {
    let mut g = graph.clone();
    let mut report = RewriteReport::new("simplify_identities");
    loop {
        let mut did = false;
        let ids: Vec<NodeId> = g.nodes().map(|n| n.id).collect();
        for id in ids {
            let node = match g.get(id) {
                Some(n) => n.clone(),
                None => continue,
            };
            let same_shape = |of: NodeId| shapes.get(of) == shapes.get(id);
            let mut redirect_to: Option<NodeId> = None;
            let mut zero_out = false;
            match node.op {
                OpKind::Add => {
                    if const_all(&g, node.preds[1], 0.0) && same_shape(node.preds[0]) {
                        redirect_to = Some(node.preds[0]);
                    } else if const_all(&g, node.preds[0], 0.0) && same_shape(node.preds[1]) {
                        redirect_to = Some(node.preds[1]);
                    }
                }
                OpKind::Sub => {
                    if const_all(&g, node.preds[1], 0.0) && same_shape(node.preds[0]) {
                        redirect_to = Some(node.preds[0]);
                    }
                }
                OpKind::Mul => {
                    if const_all(&g, node.preds[0], 0.0) || const_all(&g, node.preds[1], 0.0) {
                        zero_out = true;
                    } else if const_all(&g, node.preds[1], 1.0) && same_shape(node.preds[0]) {
                        redirect_to = Some(node.preds[0]);
                    } else if const_all(&g, node.preds[0], 1.0) && same_shape(node.preds[1]) {
                        redirect_to = Some(node.preds[1]);
                    }
                }
                OpKind::Div => {
                    if const_all(&g, node.preds[1], 1.0) && same_shape(node.preds[0]) {
                        redirect_to = Some(node.preds[0]);
                    }
                }
                OpKind::ScalarAdd { value } if value == 0.0 => redirect_to = Some(node.preds[0]),
                OpKind::ScalarMul { value } if value == 1.0 => redirect_to = Some(node.preds[0]),
                OpKind::ScalarMul { value } if value == 0.0 => zero_out = true,
                _ => {}
            }
            if zero_out {
                let shape = shapes.get(id).expect("shapes inferred for the input graph").clone();
                g.replace_op(id, OpKind::Const, Vec::new(), Some(Tensor::zeros(shape)));
                did = true;
                report.rewrites += 1;
                continue;
            }
            if let Some(to) = redirect_to {
                // an identity with no consumers (an output, say) stays as-is
                if g.redirect_preds(id, to) > 0 {
                    did = true;
                    report.rewrites += 1;
                }
                continue;
            }
            // Repeat feeding a broadcasting pointwise op: drop the repeat
            // when substituting its input leaves the result shape unchanged.
            // Slots are re-read from the graph each time: with the same
            // repeat in two slots, bypassing both can change the result
            // shape even though either bypass alone would not.
            if matches!(
                node.op,
                OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::Pow | OpKind::Fma
            ) {
                for slot in 0..node.preds.len() {
                    let current = g.get(id).expect("node is live").preds.clone();
                    let inner = match g.get(current[slot]) {
                        Some(pn) if matches!(pn.op, OpKind::Repeat { .. }) => pn.preds[0],
                        _ => continue,
                    };
                    let would: Option<Vec<&Shape>> = current
                        .iter()
                        .enumerate()
                        .map(|(i, &q)| shapes.get(if i == slot { inner } else { q }))
                        .collect();
                    let fits = would
                        .and_then(|ws| infer_op(id, &node.op, &ws).ok())
                        .as_ref()
                        == shapes.get(id);
                    if fits {
                        g.redirect_pred_slot(id, slot, inner);
                        did = true;
                        report.rewrites += 1;
                    }
                }
            }
        }
        report.nodes_removed += prune_dangling(&mut g);
        if !did {
            break;
        }
    }
    (g, report)
}

/// Collapses every maximal subgraph whose leaves are all consts into a single
/// const holding its eagerly evaluated value. `Delay` nodes are barriers and
/// anything reachable from a var is untouched.
pub fn fold_constants(graph: &Graph) -> Result<(Graph, RewriteReport), OptimiseError> {
    let mut g = graph.clone();
    let mut report = RewriteReport::new("fold_constants");

    let bound = g.id_bound() as usize;
    let mut pure = vec![false; bound];
    for node in g.nodes() {
        pure[node.id.index()] = match node.op {
            OpKind::Const => node.value.is_some(),
            OpKind::Var | OpKind::Delay { .. } => false,
            _ => node.preds.iter().all(|p| pure[p.index()]),
        };
    }
    let mut consumers: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for n in g.nodes() {
        for &p in &n.preds {
            consumers.entry(p).or_default().push(n.id);
        }
    }
    // Maximal roots: const-pure operation nodes that are outputs, update
    // endpoints, or feed at least one non-pure consumer (or nothing at all).
    let roots: Vec<NodeId> = g
        .nodes()
        .filter(|n| {
            pure[n.id.index()]
                && n.op != OpKind::Const
                && (g.is_output(n.id)
                    || g.is_iopair_endpoint(n.id)
                    || consumers
                        .get(&n.id)
                        .map_or(true, |cs| cs.iter().any(|c| !pure[c.index()])))
        })
        .map(|n| n.id)
        .collect();
    if roots.is_empty() {
        return Ok((g, report));
    }

    let values = eager_closure(&g, &roots, &DelayRegistry::default())
        .map_err(|source| OptimiseError::Fold { source })?;
    for &root in &roots {
        let value = values[&root].clone();
        if !value.is_all_finite() {
            return Err(OptimiseError::FoldNonFinite { node: root });
        }
        g.replace_op(root, OpKind::Const, Vec::new(), Some(value));
        report.constants_folded += 1;
        report.rewrites += 1;
    }
    report.nodes_removed += prune_dangling(&mut g);
    Ok((g, report))
}

/// Rewrites `Add(Mul(a, b), c)` (either side) into `Fma(a, b, c)` when the
/// multiply has exactly one consumer and is not an output or update endpoint.
/// The left operand is tried first, so results are deterministic.
pub fn fuse_fma(graph: &Graph) -> (Graph, RewriteReport) {
    let mut g = graph.clone();
    let mut report = RewriteReport::new("fuse_fma");
    let mut counts = g.consumer_counts();
    let ids: Vec<NodeId> = g.nodes().map(|n| n.id).collect();
    for id in ids {
        let node = match g.get(id) {
            Some(n) if n.op == OpKind::Add => n.clone(),
            _ => continue,
        };
        let (p, q) = (node.preds[0], node.preds[1]);
        let mul_operands = |m: NodeId, g: &Graph| -> Option<(NodeId, NodeId)> {
            let mn = g.get(m)?;
            (mn.op == OpKind::Mul
                && counts[&m] == 1
                && !g.is_output(m)
                && !g.is_iopair_endpoint(m))
            .then(|| (mn.preds[0], mn.preds[1]))
        };
        let (mul, addend, a, b) = if let Some((a, b)) = mul_operands(p, &g) {
            (p, q, a, b)
        } else if let Some((a, b)) = mul_operands(q, &g) {
            (q, p, a, b)
        } else {
            continue;
        };
        g.replace_op(id, OpKind::Fma, vec![a, b, addend], None);
        g.remove_node(mul);
        counts.remove(&mul);
        report.nodes_fused += 1;
        report.nodes_removed += 1;
        report.rewrites += 1;
    }
    (g, report)
}

/// Rewrites the adjusted-gradient pattern `(lr * g) / (eps + sqrt(s))` into a
/// single `FusedAdagrad(lr, eps)(g, s)` node. Both the scalar-parameter form
/// (`ScalarMul`/`ScalarAdd`) and the scalar-const form (`Mul`/`Add` against a
/// one-element const) match; interior nodes must be single-consumer and freed
/// consts are pruned.
pub fn fuse_adagrad(graph: &Graph, shapes: &ShapeTable) -> (Graph, RewriteReport) {
    let mut g = graph.clone();
    let mut report = RewriteReport::new("fuse_adagrad");
    'rescan: loop {
        let counts = g.consumer_counts();
        let ids: Vec<NodeId> = g.nodes().map(|n| n.id).collect();
        for id in ids {
            let node = match g.get(id) {
                Some(n) if n.op == OpKind::Div => n.clone(),
                _ => continue,
            };
            let interior_ok = |n: NodeId| {
                counts[&n] == 1 && !g.is_output(n) && !g.is_iopair_endpoint(n)
            };
            let (num, den) = (node.preds[0], node.preds[1]);
            let (lr, grad) = match &g.get(num).map(|n| n.op.clone()) {
                Some(OpKind::ScalarMul { value }) if interior_ok(num) => {
                    (*value, g.get(num).unwrap().preds[0])
                }
                Some(OpKind::Mul) if interior_ok(num) => {
                    let preds = g.get(num).unwrap().preds.clone();
                    if let Some(v) = const_scalar(&g, preds[0]) {
                        (v, preds[1])
                    } else if let Some(v) = const_scalar(&g, preds[1]) {
                        (v, preds[0])
                    } else {
                        continue;
                    }
                }
                _ => continue,
            };
            let (eps, sq) = match &g.get(den).map(|n| n.op.clone()) {
                Some(OpKind::ScalarAdd { value }) if interior_ok(den) => {
                    (*value, g.get(den).unwrap().preds[0])
                }
                Some(OpKind::Add) if interior_ok(den) => {
                    let preds = g.get(den).unwrap().preds.clone();
                    if let Some(v) = const_scalar(&g, preds[0]) {
                        (v, preds[1])
                    } else if let Some(v) = const_scalar(&g, preds[1]) {
                        (v, preds[0])
                    } else {
                        continue;
                    }
                }
                _ => continue,
            };
            let state = match g.get(sq) {
                Some(n) if n.op == OpKind::Sqrt && interior_ok(sq) => n.preds[0],
                _ => continue,
            };
            if !(eps > 0.0) {
                continue; // parameter invariant of the fused node
            }
            let removal = [num, den, sq];
            if removal.contains(&grad) || removal.contains(&state) {
                continue;
            }
            // the fused node returns grad's shape; it must be what the
            // division produced
            let grad_shape = shapes.get(grad);
            let state_shape = shapes.get(state);
            let compatible = match (grad_shape, state_shape) {
                (Some(gs), Some(ss)) => {
                    shapes.get(id) == Some(gs) && broadcast_shape(gs, ss).ok().as_ref() == Some(gs)
                }
                _ => false,
            };
            if !compatible {
                continue;
            }
            g.replace_op(id, OpKind::FusedAdagrad { lr, eps }, vec![grad, state], None);
            for r in removal {
                g.remove_node(r);
            }
            report.nodes_fused += 1;
            report.nodes_removed += 3;
            report.nodes_removed += prune_dangling(&mut g);
            report.rewrites += 1;
            continue 'rescan;
        }
        break;
    }
    (g, report)
}

/// Runs all passes (identities, folding, AdaGrad fusion, FMA fusion)
/// repeatedly until none reports a change. Terminates because every changing
/// pass strictly reduces the number of operation nodes.
pub fn optimise(graph: &Graph, shapes: &ShapeTable) -> Result<(Graph, RewriteReport), OptimiseError> {
    let mut g = graph.clone();
    let mut total = RewriteReport::new("optimise");
    loop {
        let mut changed = false;
        let (g1, r) = simplify_identities(&g, shapes);
        g = g1;
        changed |= r.changed();
        total.absorb(&r);
        let (g2, r) = fold_constants(&g)?;
        g = g2;
        changed |= r.changed();
        total.absorb(&r);
        let (g3, r) = fuse_adagrad(&g, shapes);
        g = g3;
        changed |= r.changed();
        total.absorb(&r);
        let (g4, r) = fuse_fma(&g);
        g = g4;
        changed |= r.changed();
        total.absorb(&r);
        if !changed {
            return Ok((g, total));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::eager_evaluate;
    use crate::shape::infer_shapes;
    use crate::tensor::approx_eq;
    use std::collections::BTreeMap;

    fn shapes_of(g: &Graph, hints: &[(NodeId, Shape)]) -> ShapeTable {
        let hints: BTreeMap<NodeId, Shape> = hints.iter().cloned().collect();
        infer_shapes(g, &hints).unwrap()
    }

    #[test]
    fn fold_partial_constant_subgraph() {
        // Const(2) - Const(1) feeding Mul(., x) becomes Const(1) feeding Mul
        let mut g = Graph::new();
        let c2 = g.add_const(Tensor::scalar(2.0)).unwrap();
        let c1 = g.add_const(Tensor::scalar(1.0)).unwrap();
        let s = g.add_node(OpKind::Sub, vec![c2, c1]).unwrap();
        let x = g.add_var().unwrap();
        let m = g.add_node(OpKind::Mul, vec![s, x]).unwrap();
        g.set_inputs(vec![x]).unwrap();
        g.set_outputs(vec![m]).unwrap();

        let (g2, report) = fold_constants(&g).unwrap();
        assert_eq!(report.constants_folded, 1);
        assert_eq!(report.nodes_removed, 2);
        assert_eq!(g2.node_count(), 3);
        let folded = g2.get(s).unwrap();
        assert_eq!(folded.op, OpKind::Const);
        assert_eq!(folded.value.as_ref().unwrap().data(), &[1.0]);
        assert!(g2.validate().is_empty());
    }

    #[test]
    fn fold_whole_constant_graph_to_single_const() {
        let mut g = Graph::new();
        let a = g.add_const(Tensor::scalar(3.0)).unwrap();
        let b = g.add_const(Tensor::scalar(4.0)).unwrap();
        let sum = g.add_node(OpKind::Add, vec![a, b]).unwrap();
        g.set_outputs(vec![sum]).unwrap();
        let (g2, _) = fold_constants(&g).unwrap();
        assert_eq!(g2.node_count(), 1);
        assert_eq!(g2.get(sum).unwrap().value.as_ref().unwrap().data(), &[7.0]);
    }

    #[test]
    fn fold_never_crosses_delay_and_fig1_untouched() {
        let mut g = Graph::new();
        let c = g.add_const(Tensor::scalar(2.0)).unwrap();
        let d = g
            .add_node(OpKind::Delay { tag: "f".into(), out_shape: Shape::scalar() }, vec![c])
            .unwrap();
        g.set_outputs(vec![d]).unwrap();
        let (g2, report) = fold_constants(&g).unwrap();
        assert!(!report.changed());
        assert_eq!(g2.node_count(), 2);

        // Fig. 1: the const's only consumer depends on a var, nothing folds
        let mut g = Graph::new();
        let c = g.add_const(Tensor::scalar(2.0)).unwrap();
        let x1 = g.add_var().unwrap();
        let x2 = g.add_node(OpKind::Sub, vec![c, x1]).unwrap();
        let x3 = g.add_var().unwrap();
        let x4 = g.add_node(OpKind::Mul, vec![x2, x3]).unwrap();
        let x5 = g.add_node(OpKind::Sin, vec![x4]).unwrap();
        g.set_inputs(vec![x1, x3]).unwrap();
        g.set_outputs(vec![x5]).unwrap();
        let (g2, report) = fold_constants(&g).unwrap();
        assert!(!report.changed());
        assert_eq!(g2.node_count(), 6);
    }

    #[test]
    fn fold_reports_division_by_zero() {
        let mut g = Graph::new();
        let a = g.add_const(Tensor::scalar(1.0)).unwrap();
        let b = g.add_const(Tensor::scalar(0.0)).unwrap();
        let d = g.add_node(OpKind::Div, vec![a, b]).unwrap();
        g.set_outputs(vec![d]).unwrap();
        let err = fold_constants(&g).unwrap_err();
        assert!(matches!(err, OptimiseError::FoldNonFinite { node } if node == d));
    }

    #[test]
    fn fma_basic_fusion() {
        let mut g = Graph::new();
        let x = g.add_var().unwrap();
        let y = g.add_var().unwrap();
        let z = g.add_var().unwrap();
        let m = g.add_node(OpKind::Mul, vec![x, y]).unwrap();
        let a = g.add_node(OpKind::Add, vec![m, z]).unwrap();
        g.set_inputs(vec![x, y, z]).unwrap();
        g.set_outputs(vec![a]).unwrap();

        let before = g.node_count();
        let (g2, report) = fuse_fma(&g);
        assert_eq!(report.nodes_fused, 1);
        assert_eq!(g2.node_count(), before - 1);
        assert_eq!(g2.get(a).unwrap().op, OpKind::Fma);
        assert_eq!(g2.get(a).unwrap().preds, vec![x, y, z]);
        assert!(g2.get(m).is_none());
        assert!(g2.validate().is_empty());
    }

    #[test]
    fn fma_skips_shared_mul() {
        let mut g = Graph::new();
        let x = g.add_var().unwrap();
        let y = g.add_var().unwrap();
        let m = g.add_node(OpKind::Mul, vec![x, y]).unwrap();
        let a = g.add_node(OpKind::Add, vec![m, x]).unwrap();
        let n = g.add_node(OpKind::Neg, vec![m]).unwrap();
        g.set_inputs(vec![x, y]).unwrap();
        g.set_outputs(vec![a, n]).unwrap();
        let (g2, report) = fuse_fma(&g);
        assert!(!report.changed());
        assert_eq!(g2.get(a).unwrap().op, OpKind::Add);
    }

    #[test]
    fn fma_fuses_left_mul_only() {
        let mut g = Graph::new();
        let x = g.add_var().unwrap();
        let y = g.add_var().unwrap();
        let u = g.add_var().unwrap();
        let v = g.add_var().unwrap();
        let m1 = g.add_node(OpKind::Mul, vec![x, y]).unwrap();
        let m2 = g.add_node(OpKind::Mul, vec![u, v]).unwrap();
        let a = g.add_node(OpKind::Add, vec![m1, m2]).unwrap();
        g.set_inputs(vec![x, y, u, v]).unwrap();
        g.set_outputs(vec![a]).unwrap();

        let inputs: BTreeMap<NodeId, Tensor> = [x, y, u, v]
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, Tensor::scalar(i as f64 + 1.5)))
            .collect();
        let before = eager_evaluate(&g, &inputs).unwrap();

        let (g2, report) = fuse_fma(&g);
        assert_eq!(report.nodes_fused, 1);
        assert_eq!(g2.get(a).unwrap().op, OpKind::Fma);
        assert_eq!(g2.get(a).unwrap().preds, vec![x, y, m2]);
        assert!(g2.get(m2).is_some(), "right mul survives");

        let after = eager_evaluate(&g2, &inputs).unwrap();
        assert!(approx_eq(&before[&a], &after[&a], 1e-12));
    }

    #[test]
    fn adagrad_scalar_parameter_form() {
        let mut g = Graph::new();
        let grad = g.add_var().unwrap();
        let state = g.add_var().unwrap();
        let num = g.add_node(OpKind::ScalarMul { value: 0.1 }, vec![grad]).unwrap();
        let sq = g.add_node(OpKind::Sqrt, vec![state]).unwrap();
        let den = g.add_node(OpKind::ScalarAdd { value: 1e-8 }, vec![sq]).unwrap();
        let div = g.add_node(OpKind::Div, vec![num, den]).unwrap();
        g.set_inputs(vec![grad, state]).unwrap();
        g.set_outputs(vec![div]).unwrap();

        let shapes = shapes_of(&g, &[(grad, Shape::of(&[4])), (state, Shape::of(&[4]))]);
        let (g2, report) = fuse_adagrad(&g, &shapes);
        assert_eq!(report.nodes_fused, 1);
        assert_eq!(g2.node_count(), 3);
        assert_eq!(g2.get(div).unwrap().op, OpKind::FusedAdagrad { lr: 0.1, eps: 1e-8 });
        assert_eq!(g2.get(div).unwrap().preds, vec![grad, state]);

        let mut inputs = BTreeMap::new();
        inputs.insert(grad, Tensor::new(Shape::of(&[4]), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        inputs.insert(state, Tensor::filled(Shape::of(&[4]), 4.0));
        let before = eager_evaluate(&g, &inputs).unwrap();
        let after = eager_evaluate(&g2, &inputs).unwrap();
        assert!(approx_eq(&before[&div], &after[&div], 1e-12));
    }

    #[test]
    fn adagrad_blocked_by_shared_sqrt() {
        let mut g = Graph::new();
        let grad = g.add_var().unwrap();
        let state = g.add_var().unwrap();
        let num = g.add_node(OpKind::ScalarMul { value: 0.1 }, vec![grad]).unwrap();
        let sq = g.add_node(OpKind::Sqrt, vec![state]).unwrap();
        let den = g.add_node(OpKind::ScalarAdd { value: 1e-8 }, vec![sq]).unwrap();
        let div = g.add_node(OpKind::Div, vec![num, den]).unwrap();
        g.set_inputs(vec![grad, state]).unwrap();
        g.set_outputs(vec![div, sq]).unwrap(); // sqrt result also an output
        let shapes = shapes_of(&g, &[(grad, Shape::scalar()), (state, Shape::scalar())]);
        let (g2, report) = fuse_adagrad(&g, &shapes);
        assert!(!report.changed());
        assert_eq!(g2.get(div).unwrap().op, OpKind::Div);
    }

    #[test]
    fn adagrad_absent_pattern_reports_zero() {
        let mut g = Graph::new();
        let x = g.add_var().unwrap();
        let y = g.add_node(OpKind::Neg, vec![x]).unwrap();
        g.set_inputs(vec![x]).unwrap();
        g.set_outputs(vec![y]).unwrap();
        let shapes = shapes_of(&g, &[(x, Shape::scalar())]);
        let (_, report) = fuse_adagrad(&g, &shapes);
        assert_eq!(report.nodes_fused, 0);
        assert!(!report.changed());
    }

    #[test]
    fn identities_mul_by_one() {
        let mut g = Graph::new();
        let x = g.add_var().unwrap();
        let one = g.add_const(Tensor::scalar(1.0)).unwrap();
        let m = g.add_node(OpKind::Mul, vec![x, one]).unwrap();
        let out = g.add_node(OpKind::Neg, vec![m]).unwrap();
        g.set_inputs(vec![x]).unwrap();
        g.set_outputs(vec![out]).unwrap();
        let shapes = shapes_of(&g, &[(x, Shape::of(&[3]))]);
        let (g2, report) = simplify_identities(&g, &shapes);
        assert_eq!(g2.get(out).unwrap().preds, vec![x], "consumer edges redirected");
        assert!(g2.get(m).is_none());
        assert!(g2.get(one).is_none());
        assert_eq!(report.nodes_removed, 2);
        assert!(g2.validate().is_empty());
    }

    #[test]
    fn identities_respect_broadcast_shapes() {
        // x + zeros([3,4]) must NOT collapse to x when x is [3,1]
        let mut g = Graph::new();
        let x = g.add_var().unwrap();
        let z = g.add_const(Tensor::zeros(Shape::of(&[3, 4]))).unwrap();
        let a = g.add_node(OpKind::Add, vec![x, z]).unwrap();
        let out = g.add_node(OpKind::Neg, vec![a]).unwrap();
        g.set_inputs(vec![x]).unwrap();
        g.set_outputs(vec![out]).unwrap();
        let shapes = shapes_of(&g, &[(x, Shape::of(&[3, 1]))]);
        let (g2, report) = simplify_identities(&g, &shapes);
        assert!(!report.changed());
        assert_eq!(g2.get(out).unwrap().preds, vec![a]);
    }

    #[test]
    fn identities_mul_by_zero_becomes_const() {
        let mut g = Graph::new();
        let x = g.add_var().unwrap();
        let h = g.add_node(OpKind::Exp, vec![x]).unwrap();
        let z = g.add_const(Tensor::scalar(0.0)).unwrap();
        let m = g.add_node(OpKind::Mul, vec![h, z]).unwrap();
        g.set_inputs(vec![x]).unwrap();
        g.set_outputs(vec![m]).unwrap();
        let shapes = shapes_of(&g, &[(x, Shape::of(&[2]))]);
        let (g2, _) = simplify_identities(&g, &shapes);
        let m2 = g2.get(m).unwrap();
        assert_eq!(m2.op, OpKind::Const);
        assert_eq!(m2.value.as_ref().unwrap(), &Tensor::zeros(Shape::of(&[2])));
        // the var-backed operand is pruned once unreferenced
        assert!(g2.get(h).is_none());
        assert!(g2.get(x).is_none());
        assert!(g2.inputs().is_empty());
        assert!(g2.validate().is_empty());
    }

    #[test]
    fn identities_drop_redundant_repeat() {
        // Repeat(x, axis 0, 4) feeding Add(., y): broadcasting [1,3] with
        // [4,3] already yields [4,3], so the repeat is bypassed and pruned.
        let mut g = Graph::new();
        let x = g.add_var().unwrap();
        let r = g.add_node(OpKind::Repeat { axis: 0, count: 4 }, vec![x]).unwrap();
        let y = g.add_var().unwrap();
        let a = g.add_node(OpKind::Add, vec![r, y]).unwrap();
        g.set_inputs(vec![x, y]).unwrap();
        g.set_outputs(vec![a]).unwrap();
        let shapes = shapes_of(&g, &[(x, Shape::of(&[1, 3])), (y, Shape::of(&[4, 3]))]);
        let (g2, report) = simplify_identities(&g, &shapes);
        assert!(report.changed());
        assert_eq!(g2.get(a).unwrap().preds, vec![x, y]);
        assert!(g2.get(r).is_none());

        // semantics preserved
        let mut inputs = BTreeMap::new();
        inputs.insert(x, Tensor::new(Shape::of(&[1, 3]), vec![1.0, 2.0, 3.0]).unwrap());
        inputs.insert(y, Tensor::new(Shape::of(&[4, 3]), (0..12).map(f64::from).collect()).unwrap());
        let before = eager_evaluate(&g, &inputs).unwrap();
        let after = eager_evaluate(&g2, &inputs).unwrap();
        assert!(approx_eq(&before[&a], &after[&a], 1e-12));
    }

    #[test]
    fn identities_keep_necessary_repeat() {
        // Repeat of a non-unit axis changes values; it must stay.
        let mut g = Graph::new();
        let x = g.add_var().unwrap();
        let r = g.add_node(OpKind::Repeat { axis: 0, count: 2 }, vec![x]).unwrap();
        let y = g.add_var().unwrap();
        let a = g.add_node(OpKind::Add, vec![r, y]).unwrap();
        g.set_inputs(vec![x, y]).unwrap();
        g.set_outputs(vec![a]).unwrap();
        let shapes = shapes_of(&g, &[(x, Shape::of(&[2])), (y, Shape::of(&[4]))]);
        let (g2, report) = simplify_identities(&g, &shapes);
        assert!(!report.changed());
        assert_eq!(g2.get(a).unwrap().preds, vec![r, y]);
    }

    #[test]
    fn optimise_pipeline_reaches_fixpoint() {
        // adagrad in const form wrapped with an extra +0 identity
        let mut g = Graph::new();
        let grad = g.add_var().unwrap();
        let state = g.add_var().unwrap();
        let lr = g.add_const(Tensor::scalar(0.1)).unwrap();
        let num = g.add_node(OpKind::Mul, vec![lr, grad]).unwrap();
        let sq = g.add_node(OpKind::Sqrt, vec![state]).unwrap();
        let eps = g.add_const(Tensor::scalar(1e-8)).unwrap();
        let den = g.add_node(OpKind::Add, vec![eps, sq]).unwrap();
        let div = g.add_node(OpKind::Div, vec![num, den]).unwrap();
        let zero = g.add_const(Tensor::scalar(0.0)).unwrap();
        let out = g.add_node(OpKind::Add, vec![div, zero]).unwrap();
        g.set_inputs(vec![grad, state]).unwrap();
        g.set_outputs(vec![out]).unwrap();

        let shapes = shapes_of(&g, &[(grad, Shape::of(&[2])), (state, Shape::of(&[2]))]);
        let before = g.node_count();
        let (g2, report) = optimise(&g, &shapes).unwrap();
        assert!(report.changed());
        assert!(g2.node_count() < before);
        assert!(g2.nodes().any(|n| matches!(n.op, OpKind::FusedAdagrad { .. })));

        let (g3, report2) = optimise(&g2, &shapes).unwrap();
        assert!(!report2.changed(), "second run is a fixpoint: {report2:?}");
        assert_eq!(g2.node_count(), g3.node_count());

        let mut inputs = BTreeMap::new();
        inputs.insert(grad, Tensor::new(Shape::of(&[2]), vec![1.0, -2.0]).unwrap());
        inputs.insert(state, Tensor::new(Shape::of(&[2]), vec![4.0, 9.0]).unwrap());
        let b = eager_evaluate(&g, &inputs).unwrap();
        let a = eager_evaluate(&g2, &inputs).unwrap();
        assert!(approx_eq(&b[&out], &a[&out], 1e-9));
    }

    #[test]
    fn optimise_leaves_fig1_alone() {
        let mut g = Graph::new();
        let c = g.add_const(Tensor::scalar(2.0)).unwrap();
        let x1 = g.add_var().unwrap();
        let x2 = g.add_node(OpKind::Sub, vec![c, x1]).unwrap();
        let x3 = g.add_var().unwrap();
        let x4 = g.add_node(OpKind::Mul, vec![x2, x3]).unwrap();
        let x5 = g.add_node(OpKind::Sin, vec![x4]).unwrap();
        g.set_inputs(vec![x1, x3]).unwrap();
        g.set_outputs(vec![x5]).unwrap();
        let shapes = shapes_of(&g, &[(x1, Shape::scalar()), (x3, Shape::scalar())]);
        let (g2, report) = optimise(&g, &shapes).unwrap();
        assert!(!report.changed());
        assert_eq!(g2.node_count(), 6);
    }
}

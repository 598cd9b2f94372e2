//! The computation-graph data model: operations, nodes, construction,
//! validation, topological ordering, update edges and DOT export.
//!
//! A graph is a DAG of operation nodes plus a set of update pairs feeding an
//! evaluated value back into a `Var` for the next round. Construction is
//! append-only: a node's predecessors must already exist, so node ids are
//! dense in creation order and ascending id order is always a valid
//! topological order. Rewrite passes may later delete nodes (leaving id gaps)
//! or replace a node's operation in place, but never introduce an edge from a
//! higher id to a lower one.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::shape::Shape;
use crate::tensor::Tensor;

/// Identifier of a node; dense in creation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The operation computed by a node.
///
/// Parametrised variants carry their static arguments; `Delay` wraps an
/// opaque host function (resolved by the evaluator through a registry) and
/// must declare its output shape since the engine cannot introspect it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "params", rename_all = "snake_case")]
pub enum OpKind {
    Var,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Neg,
    Sin,
    Cos,
    Exp,
    Sqrt,
    ScalarAdd { value: f64 },
    ScalarMul { value: f64 },
    Sum { axis: Option<usize> },
    MatMul,
    Reshape { target: Shape },
    Repeat { axis: usize, count: usize },
    Fma,
    FusedAdagrad { lr: f64, eps: f64 },
    Delay { tag: String, out_shape: Shape },
}

impl OpKind {
    pub fn arity(&self) -> usize {
        use OpKind::*;
        match self {
            Var | Const => 0,
            Add | Sub | Mul | Div | Pow | MatMul | FusedAdagrad { .. } => 2,
            Fma => 3,
            Neg | Sin | Cos | Exp | Sqrt | ScalarAdd { .. } | ScalarMul { .. } | Sum { .. }
            | Reshape { .. } | Repeat { .. } | Delay { .. } => 1,
        }
    }

    /// Tag string, identical to the JSON encoding of the `op` field.
    pub fn name(&self) -> &'static str {
        use OpKind::*;
        match self {
            Var => "var",
            Const => "const",
            Add => "add",
            Sub => "sub",
            Mul => "mul",
            Div => "div",
            Pow => "pow",
            Neg => "neg",
            Sin => "sin",
            Cos => "cos",
            Exp => "exp",
            Sqrt => "sqrt",
            ScalarAdd { .. } => "scalar_add",
            ScalarMul { .. } => "scalar_mul",
            Sum { .. } => "sum",
            MatMul => "mat_mul",
            Reshape { .. } => "reshape",
            Repeat { .. } => "repeat",
            Fma => "fma",
            FusedAdagrad { .. } => "fused_adagrad",
            Delay { .. } => "delay",
        }
    }

    /// Operations that read and write strictly index-aligned elements (under
    /// broadcasting of the inputs). These may overwrite a dying predecessor
    /// of equal element count during evaluation.
    pub fn is_pointwise(&self) -> bool {
        use OpKind::*;
        matches!(
            self,
            Add | Sub
                | Mul
                | Div
                | Pow
                | Neg
                | Sin
                | Cos
                | Exp
                | Sqrt
                | ScalarAdd { .. }
                | ScalarMul { .. }
                | Fma
                | FusedAdagrad { .. }
        )
    }

    pub fn validate_params(&self) -> Result<(), GraphError> {
        use OpKind::*;
        let bad = |reason: &str| {
            Err(GraphError::BadParam { op: self.name(), reason: reason.to_string() })
        };
        match self {
            Repeat { count, .. } if *count < 1 => bad("repeat count must be at least 1"),
            FusedAdagrad { eps, .. } if !(*eps > 0.0) => bad("eps must be positive"),
            FusedAdagrad { lr, .. } if !lr.is_finite() => bad("lr must be finite"),
            ScalarAdd { value } | ScalarMul { value } if !value.is_finite() => {
                bad("scalar parameter must be finite")
            }
            Delay { tag, .. } if tag.is_empty() => bad("delay tag must be non-empty"),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub op: OpKind,
    /// Ordered predecessors; duplicates are allowed (e.g. `x * x`).
    pub preds: Vec<NodeId>,
    /// Stored value: filled for `Const` at build time, for `Var` before
    /// evaluation or by `update_iopairs`.
    pub value: Option<Tensor>,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("operation {op} expects {expected} predecessors, got {got}")]
    ArityMismatch { op: &'static str, expected: usize, got: usize },
    #[error("invalid parameter for {op}: {reason}")]
    BadParam { op: &'static str, reason: String },
    #[error("graph is frozen; structure can no longer change")]
    Frozen,
    #[error("node {0} has no value slot (only var and const nodes hold values)")]
    NotValueNode(NodeId),
    #[error("cycle detected at node {0}")]
    Cycle(NodeId),
    #[error("graph failed validation: {}", format_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("update source {0} has no evaluated value")]
    IopairSourceMissing(NodeId),
    #[error("update pair ({source_node} -> {target_node}): source shape {from} does not match target shape {to}")]
    IopairShapeMismatch { source_node: NodeId, target_node: NodeId, from: Shape, to: Shape },
    #[error("node ids must be inserted in ascending order (got {got}, next free is {next})")]
    NodeOrder { got: NodeId, next: u32 },
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// One broken graph invariant, as reported by [`Graph::validate`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    NoOutputs,
    UnknownRef { list: &'static str, id: NodeId },
    InputNotVar(NodeId),
    IopairTargetNotVar { source: NodeId, target: NodeId },
    ArityMismatch { node: NodeId, expected: usize, got: usize },
    BadParam { node: NodeId, reason: String },
    Cycle { node: NodeId },
    Unreachable(NodeId),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoOutputs => write!(f, "no outputs"),
            Violation::UnknownRef { list, id } => write!(f, "{list} references unknown node {id}"),
            Violation::InputNotVar(id) => write!(f, "input {id} is not a var node"),
            Violation::IopairTargetNotVar { source, target } => {
                write!(f, "update target not Var: pair ({source} -> {target})")
            }
            Violation::ArityMismatch { node, expected, got } => {
                write!(f, "node {node} has {got} predecessors, its operation expects {expected}")
            }
            Violation::BadParam { node, reason } => write!(f, "node {node}: {reason}"),
            Violation::Cycle { node } => write!(f, "cycle through node {node}"),
            Violation::Unreachable(id) => {
                write!(f, "node {id} is not reachable backwards from any output")
            }
        }
    }
}

/// Topological ordering of a graph: a bijection from node ids to ranks
/// `0..n-1` where every edge goes from a lower rank to a higher one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopoOrder {
    seq: Vec<NodeId>,
    rank: BTreeMap<NodeId, usize>,
}

impl TopoOrder {
    pub fn sequence(&self) -> &[NodeId] {
        &self.seq
    }

    pub fn rank(&self, id: NodeId) -> Option<usize> {
        self.rank.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }

    pub(crate) fn from_sequence(seq: Vec<NodeId>) -> Self {
        let rank = seq.iter().enumerate().map(|(r, &id)| (id, r)).collect();
        TopoOrder { seq, rank }
    }
}

/// A static dataflow graph over dense tensors.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Option<Node>>,
    inputs: Vec<NodeId>,
    outputs: Vec<NodeId>,
    iopairs: Vec<(NodeId, NodeId)>,
    frozen: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn ensure_unfrozen(&self) -> Result<(), GraphError> {
        if self.frozen {
            Err(GraphError::Frozen)
        } else {
            Ok(())
        }
    }

    /// Appends a node computing `op` over `preds`. All predecessors must
    /// already exist, so the graph stays acyclic by construction.
    pub fn add_node(&mut self, op: OpKind, preds: Vec<NodeId>) -> Result<NodeId, GraphError> {
        self.ensure_unfrozen()?;
        op.validate_params()?;
        if preds.len() != op.arity() {
            return Err(GraphError::ArityMismatch {
                op: op.name(),
                expected: op.arity(),
                got: preds.len(),
            });
        }
        for &p in &preds {
            if self.get(p).is_none() {
                return Err(GraphError::UnknownNode(p));
            }
        }
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Some(Node { id, op, preds, value: None }));
        Ok(id)
    }

    pub fn add_var(&mut self) -> Result<NodeId, GraphError> {
        self.add_node(OpKind::Var, Vec::new())
    }

    pub fn add_const(&mut self, value: Tensor) -> Result<NodeId, GraphError> {
        let id = self.add_node(OpKind::Const, Vec::new())?;
        self.nodes[id.index()].as_mut().unwrap().value = Some(value);
        Ok(id)
    }

    /// Stores a value into a `Var` or `Const` slot. `Var` slots stay writable
    /// on a frozen graph; they are the only mutable state between evaluations.
    pub fn set_value(&mut self, id: NodeId, value: Tensor) -> Result<(), GraphError> {
        let node = self.nodes.get_mut(id.index()).and_then(Option::as_mut);
        let node = node.ok_or(GraphError::UnknownNode(id))?;
        match node.op {
            OpKind::Var => {}
            OpKind::Const => {
                if self.frozen {
                    return Err(GraphError::Frozen);
                }
            }
            _ => return Err(GraphError::NotValueNode(id)),
        }
        node.value = Some(value);
        Ok(())
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.get(id).and_then(|n| n.value.as_ref())
    }

    pub fn set_inputs(&mut self, ids: Vec<NodeId>) -> Result<(), GraphError> {
        self.ensure_unfrozen()?;
        self.inputs = ids;
        Ok(())
    }

    pub fn set_outputs(&mut self, ids: Vec<NodeId>) -> Result<(), GraphError> {
        self.ensure_unfrozen()?;
        self.outputs = ids;
        Ok(())
    }

    /// Declares an update pair: after an evaluation round, `source`'s value is
    /// copied into the `target` var. List-level invariants (target is a var,
    /// ids exist) are checked by [`Graph::validate`], not here.
    pub fn add_iopair(&mut self, source: NodeId, target: NodeId) -> Result<(), GraphError> {
        self.ensure_unfrozen()?;
        self.iopairs.push((source, target));
        Ok(())
    }

    pub fn get(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(id.index()).and_then(Option::as_ref)
    }

    pub fn node(&self, id: NodeId) -> Result<&Node, GraphError> {
        self.get(id).ok_or(GraphError::UnknownNode(id))
    }

    /// Live nodes in ascending id order.
    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter_map(Option::as_ref)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_some()).count()
    }

    /// One past the largest id ever allocated (deleted ids are not reused).
    pub fn id_bound(&self) -> u32 {
        self.nodes.len() as u32
    }

    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn iopairs(&self) -> &[(NodeId, NodeId)] {
        &self.iopairs
    }

    pub fn is_output(&self, id: NodeId) -> bool {
        self.outputs.contains(&id)
    }

    pub fn is_iopair_source(&self, id: NodeId) -> bool {
        self.iopairs.iter().any(|&(s, _)| s == id)
    }

    pub fn is_iopair_endpoint(&self, id: NodeId) -> bool {
        self.iopairs.iter().any(|&(s, t)| s == id || t == id)
    }

    /// Whether the node's memory must stay resident for the whole evaluation:
    /// vars, consts, outputs and update sources.
    pub fn is_keep(&self, id: NodeId) -> bool {
        match self.get(id) {
            Some(n) if matches!(n.op, OpKind::Var | OpKind::Const) => true,
            Some(_) => self.is_output(id) || self.is_iopair_source(id),
            None => false,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Validates and locks the structure. Only `Var` value slots may change
    /// afterwards.
    pub fn freeze(&mut self) -> Result<(), GraphError> {
        let violations = self.validate();
        if !violations.is_empty() {
            return Err(GraphError::Invalid(violations));
        }
        self.frozen = true;
        Ok(())
    }

    /// Number of consumer edges per node, counting duplicate edges with their
    /// multiplicity.
    pub fn consumer_counts(&self) -> BTreeMap<NodeId, usize> {
        let mut counts: BTreeMap<NodeId, usize> = self.nodes().map(|n| (n.id, 0)).collect();
        for node in self.nodes() {
            for &p in &node.preds {
                if let Some(c) = counts.get_mut(&p) {
                    *c += 1;
                }
            }
        }
        counts
    }

    /// Checks every graph invariant and returns the violations found.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.outputs.is_empty() {
            out.push(Violation::NoOutputs);
        }
        for &id in &self.inputs {
            match self.get(id) {
                None => out.push(Violation::UnknownRef { list: "inputs", id }),
                Some(n) if n.op != OpKind::Var => out.push(Violation::InputNotVar(id)),
                Some(_) => {}
            }
        }
        for &id in &self.outputs {
            if self.get(id).is_none() {
                out.push(Violation::UnknownRef { list: "outputs", id });
            }
        }
        for &(s, t) in &self.iopairs {
            if self.get(s).is_none() {
                out.push(Violation::UnknownRef { list: "iopairs", id: s });
            }
            match self.get(t) {
                None => out.push(Violation::UnknownRef { list: "iopairs", id: t }),
                Some(n) if n.op != OpKind::Var => {
                    out.push(Violation::IopairTargetNotVar { source: s, target: t })
                }
                Some(_) => {}
            }
        }
        for node in self.nodes() {
            if node.preds.len() != node.op.arity() {
                out.push(Violation::ArityMismatch {
                    node: node.id,
                    expected: node.op.arity(),
                    got: node.preds.len(),
                });
            }
            if let Err(GraphError::BadParam { reason, .. }) = node.op.validate_params() {
                out.push(Violation::BadParam { node: node.id, reason });
            }
            for &p in &node.preds {
                if self.get(p).is_none() {
                    out.push(Violation::UnknownRef { list: "preds", id: p });
                }
            }
        }
        // Construction keeps predecessors at smaller ids, which already rules
        // out cycles; check anyway so hand-built or future representations
        // are caught too.
        if let Err(GraphError::Cycle(id)) = self.check_acyclic() {
            out.push(Violation::Cycle { node: id });
        }
        // Backwards reachability from the outputs.
        let mut reached: BTreeSet<NodeId> = BTreeSet::new();
        let mut stack: Vec<NodeId> = self.outputs.iter().copied().filter(|&o| self.get(o).is_some()).collect();
        while let Some(id) = stack.pop() {
            if !reached.insert(id) {
                continue;
            }
            if let Some(n) = self.get(id) {
                stack.extend(n.preds.iter().copied());
            }
        }
        for node in self.nodes() {
            if !reached.contains(&node.id) {
                out.push(Violation::Unreachable(node.id));
            }
        }
        out
    }

    fn check_acyclic(&self) -> Result<(), GraphError> {
        // 0 = white, 1 = on stack, 2 = done
        let mut color = vec![0u8; self.nodes.len()];
        for root in self.nodes() {
            if color[root.id.index()] != 0 {
                continue;
            }
            let mut stack: Vec<(NodeId, usize)> = vec![(root.id, 0)];
            color[root.id.index()] = 1;
            while let Some(&mut (id, ref mut next)) = stack.last_mut() {
                let node = match self.get(id) {
                    Some(n) => n,
                    None => {
                        stack.pop();
                        continue;
                    }
                };
                if *next < node.preds.len() {
                    let p = node.preds[*next];
                    *next += 1;
                    if self.get(p).is_none() {
                        continue;
                    }
                    match color[p.index()] {
                        0 => {
                            color[p.index()] = 1;
                            stack.push((p, 0));
                        }
                        1 => return Err(GraphError::Cycle(p)),
                        _ => {}
                    }
                } else {
                    color[id.index()] = 2;
                    stack.pop();
                }
            }
        }
        Ok(())
    }

    /// Deterministic topological order: post-order depth-first traversal from
    /// the outputs in declaration order, visiting predecessors left to right,
    /// emitting each node once.
    pub fn topological_order(&self) -> Result<TopoOrder, GraphError> {
        let roots: Vec<NodeId> = self.outputs.clone();
        let seq = self.post_order(&roots)?;
        let rank = seq.iter().enumerate().map(|(r, &id)| (id, r)).collect();
        Ok(TopoOrder { seq, rank })
    }

    /// Post-order DFS from the given roots; shared by the public ordering and
    /// by internal passes that order a sub-DAG.
    pub(crate) fn post_order(&self, roots: &[NodeId]) -> Result<Vec<NodeId>, GraphError> {
        let mut seq = Vec::new();
        let mut visited = vec![false; self.nodes.len()];
        let mut on_stack = vec![false; self.nodes.len()];
        for &root in roots {
            self.node(root)?;
            if visited[root.index()] {
                continue;
            }
            visited[root.index()] = true;
            on_stack[root.index()] = true;
            let mut stack: Vec<(NodeId, usize)> = vec![(root, 0)];
            while let Some(&mut (id, ref mut next)) = stack.last_mut() {
                let node = self.node(id)?;
                if *next < node.preds.len() {
                    let p = node.preds[*next];
                    *next += 1;
                    self.node(p)?;
                    if on_stack[p.index()] {
                        return Err(GraphError::Cycle(p));
                    }
                    if !visited[p.index()] {
                        visited[p.index()] = true;
                        on_stack[p.index()] = true;
                        stack.push((p, 0));
                    }
                } else {
                    seq.push(id);
                    on_stack[id.index()] = false;
                    stack.pop();
                }
            }
        }
        Ok(seq)
    }

    /// Copies each update pair's source value (taken from `values`) into its
    /// target var. Called at the end of an evaluation round.
    pub fn update_iopairs(&mut self, values: &BTreeMap<NodeId, Tensor>) -> Result<(), GraphError> {
        for (source, target) in self.iopairs.clone() {
            let value = values.get(&source).ok_or(GraphError::IopairSourceMissing(source))?;
            let tnode = self.node(target)?;
            if tnode.op != OpKind::Var {
                return Err(GraphError::NotValueNode(target));
            }
            if let Some(existing) = &tnode.value {
                if existing.shape() != value.shape() {
                    return Err(GraphError::IopairShapeMismatch {
                        source_node: source,
                        target_node: target,
                        from: value.shape().clone(),
                        to: existing.shape().clone(),
                    });
                }
            }
            let value = value.clone();
            self.nodes[target.index()].as_mut().unwrap().value = Some(value);
        }
        Ok(())
    }

    /// Renders the graph in DOT form. Update edges are dashed, outputs are
    /// drawn with a double border. Rendering tolerates invalid graphs and is
    /// byte-deterministic for identical inputs.
    pub fn to_dot(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(s, "digraph lazygraph {{");
        for node in self.nodes() {
            let extra = if self.is_output(node.id) { ", peripheries=2" } else { "" };
            let _ = writeln!(s, "  n{} [label=\"{}#{}\"{}];", node.id, node.op.name(), node.id, extra);
        }
        for node in self.nodes() {
            for &p in &node.preds {
                let _ = writeln!(s, "  n{} -> n{};", p, node.id);
            }
        }
        for &(src, tgt) in &self.iopairs {
            let _ = writeln!(s, "  n{} -> n{} [style=dashed];", src, tgt);
        }
        s.push_str("}\n");
        s
    }

    // ---- rewrite support (crate-internal) ------------------------------

    /// Replaces a node's operation in place, keeping its id. New
    /// predecessors must already exist at smaller ids so ascending id order
    /// stays topological.
    pub(crate) fn replace_op(
        &mut self,
        id: NodeId,
        op: OpKind,
        preds: Vec<NodeId>,
        value: Option<Tensor>,
    ) {
        debug_assert!(!self.frozen);
        debug_assert_eq!(preds.len(), op.arity());
        debug_assert!(preds.iter().all(|p| p.0 < id.0 && self.get(*p).is_some()));
        let node = self.nodes[id.index()].as_mut().expect("replace_op on live node");
        node.op = op;
        node.preds = preds;
        node.value = value;
    }

    pub(crate) fn remove_node(&mut self, id: NodeId) {
        debug_assert!(!self.frozen);
        self.nodes[id.index()] = None;
        self.inputs.retain(|&i| i != id);
    }

    /// Redirects every consumer edge of `from` to `to`; returns how many
    /// edges changed.
    pub(crate) fn redirect_preds(&mut self, from: NodeId, to: NodeId) -> usize {
        debug_assert!(to.0 < from.0 && self.get(to).is_some());
        let mut changed = 0;
        for slot in self.nodes.iter_mut().flatten() {
            for p in &mut slot.preds {
                if *p == from {
                    *p = to;
                    changed += 1;
                }
            }
        }
        changed
    }

    pub(crate) fn redirect_pred_slot(&mut self, consumer: NodeId, slot: usize, to: NodeId) {
        let node = self.nodes[consumer.index()].as_mut().expect("redirect on live node");
        node.preds[slot] = to;
    }

    /// Loader entry: inserts a node at an explicit id, padding gaps. Ids must
    /// arrive in strictly ascending order and predecessors must already be
    /// present (hence at smaller ids).
    pub(crate) fn insert_node_raw(
        &mut self,
        id: NodeId,
        op: OpKind,
        preds: Vec<NodeId>,
    ) -> Result<(), GraphError> {
        self.ensure_unfrozen()?;
        if id.index() < self.nodes.len() {
            return Err(GraphError::NodeOrder { got: id, next: self.nodes.len() as u32 });
        }
        op.validate_params()?;
        if preds.len() != op.arity() {
            return Err(GraphError::ArityMismatch {
                op: op.name(),
                expected: op.arity(),
                got: preds.len(),
            });
        }
        for &p in &preds {
            if self.get(p).is_none() {
                return Err(GraphError::UnknownNode(p));
            }
        }
        while self.nodes.len() < id.index() {
            self.nodes.push(None);
        }
        self.nodes.push(Some(Node { id, op, preds, value: None }));
        Ok(())
    }
}

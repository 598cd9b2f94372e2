//! CPU evaluation.
//!
//! [`evaluate`] executes a planned graph with block-backed storage: every
//! pool block is one contiguous buffer and a node's value occupies its first
//! `numel` elements, reshaped logically. [`eager_evaluate`] is the reference
//! path: every node gets private storage, no sharing — the two must agree.
//!
//! Buffers are slices of `Cell<f64>` so a pointwise kernel may write through
//! a view that aliases one of its input views (inplace reuse). Kernels read
//! each input element before writing the output element of the same index,
//! which is exactly the discipline the planner's aliasing rules assume.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::graph::{Graph, GraphError, NodeId, OpKind};
use crate::planner::{AllocationPlan, BlockId};
use crate::shape::{infer_op, infer_shapes, Shape, ShapeError, ELEMENT_BYTES};
use crate::tensor::Tensor;

/// Pattern written into freed views when poisoning is enabled; any kernel
/// reading memory after its lifetime ends drags this into the results.
pub const FREED_SENTINEL: f64 = 6.6e66;

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Fill views with [`FREED_SENTINEL`] as soon as their node's last
    /// consumer has run. Debugging aid for lifetime bugs.
    pub poison_freed: bool,
}

type DelayFn = dyn Fn(&Tensor) -> Tensor + Send + Sync;

/// Host functions invocable from `Delay` nodes, keyed by tag.
#[derive(Default)]
pub struct DelayRegistry {
    fns: BTreeMap<String, Box<DelayFn>>,
}

impl DelayRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        tag: impl Into<String>,
        f: impl Fn(&Tensor) -> Tensor + Send + Sync + 'static,
    ) {
        self.fns.insert(tag.into(), Box::new(f));
    }

    pub fn get(&self, tag: &str) -> Option<&DelayFn> {
        self.fns.get(tag).map(|b| b.as_ref())
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("graph: {0}")]
    Graph(#[from] GraphError),
    #[error("shape: {0}")]
    Shape(#[from] ShapeError),
    #[error("missing input value for var node {0}")]
    MissingInput(NodeId),
    #[error("const node {0} has no stored value")]
    MissingConst(NodeId),
    #[error("node {node}: plan block {block} holds {have} bytes, node needs {need}")]
    PlanTooSmall { node: NodeId, block: BlockId, need: u64, have: u64 },
    #[error("node {0} has no block assignment in the plan")]
    MissingAssignment(NodeId),
    #[error("node {node}: no delay function registered for tag {tag:?}")]
    UnknownDelay { node: NodeId, tag: String },
    #[error("node {node}: delay function returned shape {got}, declared {declared}")]
    DelayShape { node: NodeId, declared: Shape, got: Shape },
}

// ---------------------------------------------------------------------------
// kernels

type View<'a> = (&'a [Cell<f64>], &'a Shape);

/// Row-major element strides of `inp` aligned at the trailing axes of `out`,
/// with stride 0 on broadcast axes.
fn bcast_strides(out: &Shape, inp: &Shape) -> Vec<usize> {
    let od = out.dims();
    let id = inp.dims();
    let mut istr = vec![0usize; id.len()];
    let mut acc = 1usize;
    for k in (0..id.len()).rev() {
        istr[k] = acc;
        acc *= id[k];
    }
    let mut s = vec![0usize; od.len()];
    for k in 1..=id.len() {
        let (oi, ii) = (od.len() - k, id.len() - k);
        s[oi] = if id[ii] == 1 && od[oi] != 1 { 0 } else { istr[ii] };
    }
    s
}

/// Calls `f(out_flat, input_offsets)` for every output element, walking the
/// output shape row-major with per-input broadcast offsets.
fn for_each_bcast(out: &Shape, ins: &[&Shape], mut f: impl FnMut(usize, &[usize])) {
    let dims = out.dims();
    let rank = dims.len();
    let strides: Vec<Vec<usize>> = ins.iter().map(|s| bcast_strides(out, s)).collect();
    let n = out.numel();
    let mut idx = vec![0usize; rank];
    let mut offs = vec![0usize; ins.len()];
    for flat in 0..n {
        f(flat, &offs);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            for (o, st) in offs.iter_mut().zip(&strides) {
                *o += st[ax];
            }
            if idx[ax] < dims[ax] {
                break;
            }
            for (o, st) in offs.iter_mut().zip(&strides) {
                *o -= st[ax] * dims[ax];
            }
            idx[ax] = 0;
        }
    }
}

fn view_to_tensor(v: View) -> Tensor {
    let data: Vec<f64> = v.0.iter().map(Cell::get).collect();
    Tensor::new(v.1.clone(), data).expect("view length matches its shape")
}

/// Applies one operation's kernel. Views may alias only when the operation is
/// pointwise and the aliased input has the output's element count; the
/// planner guarantees this and kernels only rely on index-aligned reads.
fn exec_op(
    id: NodeId,
    op: &OpKind,
    ins: &[View],
    out: &[Cell<f64>],
    out_shape: &Shape,
    registry: &DelayRegistry,
) -> Result<(), EvalError> {
    use OpKind::*;

    let unary = |f: &dyn Fn(f64) -> f64| {
        let a = ins[0].0;
        for i in 0..out.len() {
            out[i].set(f(a[i].get()));
        }
    };
    let binary = |f: &dyn Fn(f64, f64) -> f64| {
        let (a, b) = (ins[0], ins[1]);
        for_each_bcast(out_shape, &[a.1, b.1], |flat, offs| {
            out[flat].set(f(a.0[offs[0]].get(), b.0[offs[1]].get()));
        });
    };

    match op {
        Var | Const => unreachable!("sources are materialised by the driver"),
        Add => binary(&|a, b| a + b),
        Sub => binary(&|a, b| a - b),
        Mul => binary(&|a, b| a * b),
        Div => binary(&|a, b| a / b),
        Pow => binary(&f64::powf),
        Neg => unary(&|x| -x),
        Sin => unary(&f64::sin),
        Cos => unary(&f64::cos),
        Exp => unary(&f64::exp),
        Sqrt => unary(&f64::sqrt),
        ScalarAdd { value } => unary(&|x| x + value),
        ScalarMul { value } => unary(&|x| x * value),
        Fma => {
            let (a, b, c) = (ins[0], ins[1], ins[2]);
            for_each_bcast(out_shape, &[a.1, b.1, c.1], |flat, offs| {
                out[flat].set(a.0[offs[0]].get().mul_add(b.0[offs[1]].get(), c.0[offs[2]].get()));
            });
        }
        FusedAdagrad { lr, eps } => {
            let (g, s) = (ins[0], ins[1]);
            for_each_bcast(out_shape, &[g.1, s.1], |flat, offs| {
                let adj = lr * g.0[offs[0]].get() / (s.0[offs[1]].get().sqrt() + eps);
                out[flat].set(adj);
            });
        }
        Sum { axis: None } => {
            let a = ins[0].0;
            let mut acc = 0.0;
            for cell in a {
                acc += cell.get();
            }
            out[0].set(acc);
        }
        Sum { axis: Some(ax) } => {
            let (a, ashape) = ins[0];
            for cell in out {
                cell.set(0.0);
            }
            let dims = ashape.dims();
            // output strides per input axis; the reduced axis contributes 0
            let mut ostr = vec![0usize; dims.len()];
            let mut acc = 1usize;
            for k in (0..dims.len()).rev() {
                if k != *ax {
                    ostr[k] = acc;
                    acc *= dims[k];
                }
            }
            let mut idx = vec![0usize; dims.len()];
            for flat in 0..ashape.numel() {
                let o: usize = idx.iter().zip(&ostr).map(|(i, s)| i * s).sum();
                out[o].set(out[o].get() + a[flat].get());
                for k in (0..dims.len()).rev() {
                    idx[k] += 1;
                    if idx[k] < dims[k] {
                        break;
                    }
                    idx[k] = 0;
                }
            }
        }
        MatMul => {
            let ((a, ashape), (b, _)) = (ins[0], ins[1]);
            let (m, k) = (ashape.dims()[0], ashape.dims()[1]);
            let n = out_shape.dims()[1];
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += a[i * k + p].get() * b[p * n + j].get();
                    }
                    out[i * n + j].set(acc);
                }
            }
        }
        Reshape { .. } => {
            let a = ins[0].0;
            for i in 0..out.len() {
                out[i].set(a[i].get());
            }
        }
        Repeat { axis, count } => {
            let (a, ashape) = ins[0];
            let adims = ashape.dims();
            let mut istr = vec![0usize; adims.len()];
            let mut acc = 1usize;
            for k in (0..adims.len()).rev() {
                istr[k] = acc;
                acc *= adims[k];
            }
            let odims = out_shape.dims();
            let mut idx = vec![0usize; odims.len()];
            for flat in 0..out_shape.numel() {
                // element repetition: output index j along the axis reads
                // input index j / count
                let off: usize = idx
                    .iter()
                    .enumerate()
                    .map(|(k, &i)| if k == *axis { (i / count) * istr[k] } else { i * istr[k] })
                    .sum();
                out[flat].set(a[off].get());
                for k in (0..odims.len()).rev() {
                    idx[k] += 1;
                    if idx[k] < odims[k] {
                        break;
                    }
                    idx[k] = 0;
                }
            }
        }
        Delay { tag, out_shape: declared } => {
            let f = registry
                .get(tag)
                .ok_or_else(|| EvalError::UnknownDelay { node: id, tag: tag.clone() })?;
            let input = view_to_tensor(ins[0]);
            let result = f(&input);
            if result.shape() != declared {
                return Err(EvalError::DelayShape {
                    node: id,
                    declared: declared.clone(),
                    got: result.shape().clone(),
                });
            }
            for (cell, &v) in out.iter().zip(result.data()) {
                cell.set(v);
            }
        }
    }
    Ok(())
}

fn cells_of(data: &[f64]) -> Vec<Cell<f64>> {
    data.iter().map(|&v| Cell::new(v)).collect()
}

/// Evaluates one operation on owned tensors; shapes are checked by the same
/// rules as full inference.
pub(crate) fn eval_node_value(
    id: NodeId,
    op: &OpKind,
    ins: &[&Tensor],
    registry: &DelayRegistry,
) -> Result<Tensor, EvalError> {
    let in_shapes: Vec<&Shape> = ins.iter().map(|t| t.shape()).collect();
    let out_shape = infer_op(id, op, &in_shapes)?;
    let in_cells: Vec<Vec<Cell<f64>>> = ins.iter().map(|t| cells_of(t.data())).collect();
    let views: Vec<View> = in_cells.iter().zip(ins).map(|(c, t)| (&c[..], t.shape())).collect();
    let out = vec![Cell::new(0.0f64); out_shape.numel()];
    exec_op(id, op, &views, &out, &out_shape, registry)?;
    let data = out.iter().map(Cell::get).collect();
    Ok(Tensor::new(out_shape, data).expect("kernel output sized by its shape"))
}

// ---------------------------------------------------------------------------
// eager driver

fn source_tensor<'a>(
    graph: &'a Graph,
    inputs: &'a BTreeMap<NodeId, Tensor>,
    id: NodeId,
    op: &OpKind,
) -> Result<&'a Tensor, EvalError> {
    match op {
        OpKind::Var => match (inputs.get(&id), graph.value(id)) {
            (Some(t), Some(slot)) if t.shape() != slot.shape() => {
                Err(ShapeError::SourceConflict {
                    node: id,
                    declared: t.shape().clone(),
                    stored: slot.shape().clone(),
                }
                .into())
            }
            (Some(t), _) => Ok(t),
            (None, Some(slot)) => Ok(slot),
            (None, None) => Err(EvalError::MissingInput(id)),
        },
        OpKind::Const => graph.value(id).ok_or(EvalError::MissingConst(id)),
        _ => unreachable!("not a source"),
    }
}

/// Reference semantics: evaluates every node into private, freshly allocated
/// storage and returns the full node-to-value map.
pub fn eager_evaluate(
    graph: &Graph,
    inputs: &BTreeMap<NodeId, Tensor>,
) -> Result<BTreeMap<NodeId, Tensor>, EvalError> {
    eager_evaluate_with(graph, inputs, &DelayRegistry::default())
}

pub fn eager_evaluate_with(
    graph: &Graph,
    inputs: &BTreeMap<NodeId, Tensor>,
    registry: &DelayRegistry,
) -> Result<BTreeMap<NodeId, Tensor>, EvalError> {
    let order = graph.topological_order()?;
    eager_over(graph, order.sequence(), inputs, registry)
}

/// Eagerly evaluates the ancestor closure of `roots` (no inputs beyond
/// stored values); used by constant folding.
pub(crate) fn eager_closure(
    graph: &Graph,
    roots: &[NodeId],
    registry: &DelayRegistry,
) -> Result<BTreeMap<NodeId, Tensor>, EvalError> {
    let seq = graph.post_order(roots)?;
    eager_over(graph, &seq, &BTreeMap::new(), registry)
}

fn eager_over(
    graph: &Graph,
    seq: &[NodeId],
    inputs: &BTreeMap<NodeId, Tensor>,
    registry: &DelayRegistry,
) -> Result<BTreeMap<NodeId, Tensor>, EvalError> {
    let mut values: BTreeMap<NodeId, Tensor> = BTreeMap::new();
    for &id in seq {
        let node = graph.node(id)?;
        let value = match node.op {
            OpKind::Var | OpKind::Const => source_tensor(graph, inputs, id, &node.op)?.clone(),
            ref op => {
                let ins: Vec<&Tensor> = node.preds.iter().map(|p| &values[p]).collect();
                eval_node_value(id, op, &ins, registry)?
            }
        };
        values.insert(id, value);
    }
    Ok(values)
}

// ---------------------------------------------------------------------------
// planned driver

enum Storage {
    Pool { block: usize, numel: usize },
    External(Vec<Cell<f64>>),
}

/// Block-backed storage for one evaluation: one buffer per pool block, with
/// each node viewing the first `numel` elements of its block. Var and const
/// values live in separate external buffers.
pub struct BlockStore {
    blocks: Vec<Vec<Cell<f64>>>,
    slots: BTreeMap<NodeId, Storage>,
}

/// Executes `graph` under `plan`, reading var values from `inputs` (falling
/// back to stored slots). Returns copies of the output tensors plus the
/// values of update-pair sources, so `update_iopairs` can run on the result.
pub fn evaluate(
    graph: &Graph,
    plan: &AllocationPlan,
    inputs: &BTreeMap<NodeId, Tensor>,
) -> Result<BTreeMap<NodeId, Tensor>, EvalError> {
    evaluate_with(graph, plan, inputs, &DelayRegistry::default(), &EvalOptions::default())
}

pub fn evaluate_with(
    graph: &Graph,
    plan: &AllocationPlan,
    inputs: &BTreeMap<NodeId, Tensor>,
    registry: &DelayRegistry,
    options: &EvalOptions,
) -> Result<BTreeMap<NodeId, Tensor>, EvalError> {
    // Shapes come from the actual inputs handed in, so a plan computed for
    // other sizes is caught below when a view does not fit its block.
    let mut hints: BTreeMap<NodeId, Shape> = BTreeMap::new();
    for node in graph.nodes() {
        if node.op == OpKind::Var {
            if let Some(t) = inputs.get(&node.id) {
                hints.insert(node.id, t.shape().clone());
            }
        }
    }
    let table = infer_shapes(graph, &hints)?;

    #[cfg(debug_assertions)]
    {
        use crate::graph::TopoOrder;
        let order = TopoOrder::from_sequence(plan.order.clone());
        let violations = crate::planner::validate_plan(graph, &order, &table.sizes(), plan);
        debug_assert!(violations.is_empty(), "plan invalid for this graph: {violations:?}");
    }

    let mut store = BlockStore {
        blocks: plan
            .block_sizes
            .iter()
            .map(|&bytes| vec![Cell::new(0.0); (bytes / ELEMENT_BYTES) as usize])
            .collect(),
        slots: BTreeMap::new(),
    };

    for &id in &plan.order {
        let node = graph.node(id)?;
        let shape = table.get(id).expect("inference is total").clone();
        if matches!(node.op, OpKind::Var | OpKind::Const) {
            let t = source_tensor(graph, inputs, id, &node.op)?;
            let cells: Vec<Cell<f64>> = t.data().iter().map(|&v| Cell::new(v)).collect();
            store.slots.insert(id, Storage::External(cells));
        } else {
            let block = *plan.assignment.get(&id).ok_or(EvalError::MissingAssignment(id))?;
            let have = plan.block_sizes[block.index()];
            if shape.size_bytes() > have {
                return Err(EvalError::PlanTooSmall {
                    node: id,
                    block,
                    need: shape.size_bytes(),
                    have,
                });
            }
            store
                .slots
                .insert(id, Storage::Pool { block: block.index(), numel: shape.numel() });
        }
    }

    // Poison schedule: after the step where a non-keep node's last consumer
    // runs, its view is dead; fill it unless the very same step claimed the
    // block (inplace reuse already overwrote it).
    let mut frees_after: BTreeMap<usize, Vec<NodeId>> = BTreeMap::new();
    if options.poison_freed {
        let mut last_use: BTreeMap<NodeId, usize> = BTreeMap::new();
        for (rank, &id) in plan.order.iter().enumerate() {
            for &p in &graph.node(id)?.preds {
                last_use.insert(p, rank);
            }
        }
        for (&id, &rank) in &last_use {
            if !graph.is_keep(id) && plan.assignment.contains_key(&id) {
                frees_after.entry(rank).or_default().push(id);
            }
        }
    }
    let birth_at: BTreeMap<usize, BTreeSet<BlockId>> = if options.poison_freed {
        plan.order
            .iter()
            .enumerate()
            .filter_map(|(r, id)| plan.assignment.get(id).map(|&b| (r, b)))
            .fold(BTreeMap::new(), |mut m, (r, b)| {
                m.entry(r).or_default().insert(b);
                m
            })
    } else {
        BTreeMap::new()
    };

    fn view_of(store: &BlockStore, id: NodeId) -> &[Cell<f64>] {
        match &store.slots[&id] {
            Storage::Pool { block, numel } => &store.blocks[*block][..*numel],
            Storage::External(cells) => cells,
        }
    }

    for (rank, &id) in plan.order.iter().enumerate() {
        let node = graph.node(id)?;
        if !matches!(node.op, OpKind::Var | OpKind::Const) {
            let out_shape = table.get(id).unwrap();
            let ins: Vec<View> = node
                .preds
                .iter()
                .map(|&p| (view_of(&store, p), table.get(p).unwrap()))
                .collect();
            let out = view_of(&store, id);
            exec_op(id, &node.op, &ins, out, out_shape, registry)?;
        }
        if options.poison_freed {
            if let Some(dead) = frees_after.get(&rank) {
                for &d in dead {
                    let reclaimed_now = birth_at
                        .get(&rank)
                        .is_some_and(|bs| bs.contains(&plan.assignment[&d]));
                    if !reclaimed_now {
                        for cell in view_of(&store, d) {
                            cell.set(FREED_SENTINEL);
                        }
                    }
                }
            }
        }
    }

    let mut wanted: BTreeSet<NodeId> = graph.outputs().iter().copied().collect();
    wanted.extend(graph.iopairs().iter().map(|&(s, _)| s));
    let mut result = BTreeMap::new();
    for id in wanted {
        let shape = table.get(id).expect("inference is total");
        result.insert(id, view_to_tensor((view_of(&store, id), shape)));
    }
    Ok(result)
}

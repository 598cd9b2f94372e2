//! Memory planning: assigns every computed node a share of a small set of
//! reusable blocks so that each node is evaluated exactly once and the sum of
//! block sizes stays low.
//!
//! The planner walks a topological order keeping a reference count per node
//! (its number of consumer edges). When a predecessor's count reaches zero
//! its block returns to a free pool, ordered by size. A node takes the
//! smallest sufficient free block, growing the largest free block when all
//! are too small and creating a new one only when the pool is empty. For
//! pointwise operations a dying predecessor's block of equal element count is
//! preferred (inplace reuse); other operations allocate before any
//! predecessor is released so they never alias a parent. Var and const nodes
//! live in external storage; keep-flagged nodes (vars, consts, outputs,
//! update sources) never return their memory to the pool.
//!
//! Everything here is deterministic: ties break towards the lowest block id.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, NodeId, OpKind, TopoOrder, Violation};

/// Identifier of a pool block; dense in allocation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockId(pub u32);

impl BlockId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Whether evaluation of `op` may write into the storage of one of its
/// (dying, equally sized) predecessors. Pointwise operations are safe;
/// operations that read their inputs non-pointwise (matmul, reductions,
/// layout changes, opaque host functions) are not.
pub fn inplace_safe(op: &OpKind) -> bool {
    op.is_pointwise()
}

/// Mutable state of a planning run: per-node remaining-consumer counts and
/// the pool of reusable blocks ordered by (size, id).
#[derive(Clone, Debug, Default)]
pub struct PlannerState {
    pub refs: BTreeMap<NodeId, usize>,
    pub reusable: BTreeSet<(u64, BlockId)>,
    pub block_sizes: Vec<u64>,
    /// Ordered-pool operations performed (queries and releases); each one is
    /// logarithmic in the pool size.
    pub pool_lookups: u64,
}

impl PlannerState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns a block to the pool.
    pub fn release(&mut self, block: BlockId) {
        self.pool_lookups += 1;
        self.reusable.insert((self.block_sizes[block.index()], block));
    }

    /// Picks a block for a value of `size` bytes and removes it from the
    /// pool: the smallest sufficient block (preferring `prefer` entries,
    /// which belong to dying direct predecessors); if every free block is too
    /// small, the largest free block grown to `size`; a fresh block when the
    /// pool is empty. Ties break towards the lowest id.
    pub fn find_best_block(&mut self, size: u64, prefer: &BTreeSet<BlockId>) -> BlockId {
        debug_assert!(size > 0);
        self.pool_lookups += 1;
        if !prefer.is_empty() {
            let best = prefer
                .iter()
                .map(|&b| (self.block_sizes[b.index()], b))
                .filter(|&(sz, _)| sz >= size)
                .min();
            if let Some(entry) = best {
                self.reusable.remove(&entry);
                return entry.1;
            }
        }
        if let Some(&entry) = self.reusable.range((size, BlockId(0))..).next() {
            self.reusable.remove(&entry);
            return entry.1;
        }
        if let Some(&(largest, _)) = self.reusable.iter().next_back() {
            let entry = *self.reusable.range((largest, BlockId(0))..).next().unwrap();
            self.reusable.remove(&entry);
            self.block_sizes[entry.1.index()] = size;
            return entry.1;
        }
        let b = BlockId(self.block_sizes.len() as u32);
        self.block_sizes.push(size);
        b
    }
}

/// The planner's result: block assignment for every computed node, final
/// block sizes, the set of externally stored nodes and the footprint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AllocationPlan {
    pub assignment: BTreeMap<NodeId, BlockId>,
    pub block_sizes: Vec<u64>,
    pub external: BTreeSet<NodeId>,
    /// Sum of block sizes plus external sizes.
    pub peak_bytes: u64,
    pub pool_bytes: u64,
    pub external_bytes: u64,
    /// The evaluation order the plan was computed for.
    pub order: Vec<NodeId>,
    pub pool_lookups: u64,
}

impl AllocationPlan {
    pub fn pool_block_count(&self) -> usize {
        self.block_sizes.len()
    }

    /// Pool footprint of the one-private-block-per-node baseline.
    pub fn naive_pool_bytes(&self, sizes: &BTreeMap<NodeId, u64>) -> u64 {
        self.assignment.keys().map(|id| sizes[id]).sum()
    }
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("graph failed validation: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidGraph(Vec<Violation>),
    #[error("ordering is not topological: node {node} precedes its predecessor {pred}")]
    NotTopological { node: NodeId, pred: NodeId },
    #[error("ordering covers {got} nodes, graph has {expected}")]
    OrderIncomplete { got: usize, expected: usize },
    #[error("no size for node {0}")]
    MissingSize(NodeId),
    #[error("node {0} has size zero (a scalar is one element of eight bytes)")]
    ZeroSize(NodeId),
}

/// Computes a block-sharing allocation for `graph` walked in `order`, with
/// per-node byte sizes from `sizes`. Deterministic; O(n log b) for n nodes
/// and b blocks.
pub fn plan(
    graph: &Graph,
    order: &TopoOrder,
    sizes: &BTreeMap<NodeId, u64>,
) -> Result<AllocationPlan, PlanError> {
    let violations = graph.validate();
    if !violations.is_empty() {
        return Err(PlanError::InvalidGraph(violations));
    }
    if order.len() != graph.node_count() {
        return Err(PlanError::OrderIncomplete { got: order.len(), expected: graph.node_count() });
    }
    for &id in order.sequence() {
        let node = graph.get(id).expect("validated graph");
        let rank = order.rank(id).unwrap();
        for &p in &node.preds {
            match order.rank(p) {
                Some(pr) if pr < rank => {}
                _ => return Err(PlanError::NotTopological { node: id, pred: p }),
            }
        }
        let s = sizes.get(&id).copied().ok_or(PlanError::MissingSize(id))?;
        if s == 0 {
            return Err(PlanError::ZeroSize(id));
        }
    }

    let mut state = PlannerState::new();
    state.refs = graph.consumer_counts();

    let mut assignment: BTreeMap<NodeId, BlockId> = BTreeMap::new();
    let mut external: BTreeSet<NodeId> = BTreeSet::new();

    for &id in order.sequence() {
        let node = graph.get(id).expect("validated graph");
        if matches!(node.op, OpKind::Var | OpKind::Const) {
            external.insert(id);
            continue;
        }
        let size = sizes[&id];

        // Decrement predecessor refs (once per edge) and collect the ones
        // whose memory dies at this node.
        let mut dying: Vec<NodeId> = Vec::new();
        for &p in &node.preds {
            let r = state.refs.get_mut(&p).expect("validated graph");
            debug_assert!(*r > 0);
            *r -= 1;
            if *r == 0 && !graph.is_keep(p) && !external.contains(&p) {
                dying.push(p);
            }
        }

        // Pointwise nodes may overwrite a dying predecessor, but only one of
        // equal element count: a broadcast read from a smaller aliased buffer
        // would see partially written data. Equal-sized dying predecessors
        // are released before allocation (and preferred); the rest after.
        let safe = inplace_safe(&node.op);
        let mut prefer: BTreeSet<BlockId> = BTreeSet::new();
        let mut released_early: BTreeSet<NodeId> = BTreeSet::new();
        if safe {
            for &p in &dying {
                if sizes[&p] == size {
                    let b = assignment[&p];
                    state.release(b);
                    prefer.insert(b);
                    released_early.insert(p);
                }
            }
        }

        let block = state.find_best_block(size, &prefer);
        assignment.insert(id, block);

        for &p in &dying {
            if !released_early.contains(&p) {
                state.release(assignment[&p]);
            }
        }
        // Keep-flagged nodes simply never come back: their refs either never
        // reach zero here or the keep check above filters them out.
    }

    let pool_bytes: u64 = state.block_sizes.iter().sum();
    let external_bytes: u64 = external.iter().map(|id| sizes[id]).sum();
    Ok(AllocationPlan {
        assignment,
        block_sizes: state.block_sizes,
        external,
        peak_bytes: pool_bytes + external_bytes,
        pool_bytes,
        external_bytes,
        order: order.sequence().to_vec(),
        pool_lookups: state.pool_lookups,
    })
}

/// One broken plan invariant, as reported by [`validate_plan`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PlanViolation {
    Overlap { first: NodeId, second: NodeId, block: BlockId },
    KeepReassigned { kept: NodeId, node: NodeId, block: BlockId },
    UnsafeAlias { node: NodeId, pred: NodeId, block: BlockId },
    Undersized { node: NodeId, block: BlockId, need: u64, have: u64 },
    MissingAssignment(NodeId),
    ExternalMismatch(NodeId),
}

impl fmt::Display for PlanViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanViolation::Overlap { first, second, block } => write!(
                f,
                "nodes {first} and {second} share block {block} with overlapping lifetimes"
            ),
            PlanViolation::KeepReassigned { kept, node, block } => {
                write!(f, "keep-flagged node {kept}'s block {block} is reassigned to node {node}")
            }
            PlanViolation::UnsafeAlias { node, pred, block } => write!(
                f,
                "node {node} overwrites predecessor {pred} in block {block} but its operation is not inplace-safe for it"
            ),
            PlanViolation::Undersized { node, block, need, have } => {
                write!(f, "block {block} holds {have} bytes, node {node} needs {need}")
            }
            PlanViolation::MissingAssignment(id) => write!(f, "node {id} has no block assignment"),
            PlanViolation::ExternalMismatch(id) => {
                write!(f, "node {id} is misclassified as external/pool storage")
            }
        }
    }
}

/// Independent checker: recomputes every node's lifetime by brute force and
/// reports blocks shared by overlapping lifetimes, undersized blocks,
/// reassigned keep blocks and unsafe inplace handoffs.
pub fn validate_plan(
    graph: &Graph,
    order: &TopoOrder,
    sizes: &BTreeMap<NodeId, u64>,
    plan: &AllocationPlan,
) -> Vec<PlanViolation> {
    let mut out = Vec::new();
    let n = order.len();

    // birth = evaluation rank; end = rank of the last consumer, or the end of
    // the schedule for keep-flagged nodes. A block is free starting at its
    // owner's end rank; the node evaluated at exactly that rank is the final
    // consumer, so a handoff at end == birth is inplace reuse.
    let mut last_use: BTreeMap<NodeId, usize> = BTreeMap::new();
    for &id in order.sequence() {
        let rank = order.rank(id).unwrap();
        last_use.entry(id).or_insert(rank);
        for &p in &graph.get(id).expect("node in order").preds {
            let e = last_use.entry(p).or_insert(rank);
            *e = (*e).max(rank);
        }
    }
    let end_of = |id: NodeId| -> usize {
        if graph.is_keep(id) {
            n
        } else {
            last_use[&id]
        }
    };

    let mut per_block: BTreeMap<BlockId, Vec<NodeId>> = BTreeMap::new();
    for &id in order.sequence() {
        let node = graph.get(id).expect("node in order");
        let is_source = matches!(node.op, OpKind::Var | OpKind::Const);
        if is_source != plan.external.contains(&id) {
            out.push(PlanViolation::ExternalMismatch(id));
            continue;
        }
        if is_source {
            continue;
        }
        match plan.assignment.get(&id) {
            None => out.push(PlanViolation::MissingAssignment(id)),
            Some(&b) => {
                let have = plan.block_sizes.get(b.index()).copied().unwrap_or(0);
                let need = sizes.get(&id).copied().unwrap_or(0);
                if have < need {
                    out.push(PlanViolation::Undersized { node: id, block: b, need, have });
                }
                per_block.entry(b).or_default().push(id);
            }
        }
    }

    for (&block, nodes) in &per_block {
        let mut nodes = nodes.clone();
        nodes.sort_by_key(|&id| order.rank(id).unwrap());
        for w in nodes.windows(2) {
            let (a, b) = (w[0], w[1]);
            let (a_end, b_birth) = (end_of(a), order.rank(b).unwrap());
            if b_birth < a_end {
                if graph.is_keep(a) {
                    out.push(PlanViolation::KeepReassigned { kept: a, node: b, block });
                } else {
                    out.push(PlanViolation::Overlap { first: a, second: b, block });
                }
            } else if b_birth == a_end {
                // handoff: only legal as inplace reuse by a pointwise final
                // consumer of equal element count
                let bn = graph.get(b).expect("node in order");
                let legal = bn.preds.contains(&a)
                    && inplace_safe(&bn.op)
                    && sizes.get(&a) == sizes.get(&b);
                if !legal {
                    out.push(PlanViolation::UnsafeAlias { node: b, pred: a, block });
                }
            }
        }
    }
    out
}

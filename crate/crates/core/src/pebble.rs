//! Exact pebble-game solver for small DAGs.
//!
//! A pebble on a vertex means its value is resident. A vertex may be pebbled
//! when all its predecessors are pebbled, either with a new pebble or by
//! sliding a pebble off one predecessor (inplace reuse); pebbles may be
//! removed at any time for free. Space is the maximum number of pebbles ever
//! resident, time the number of placements (including slides). The searches
//! here are exact and therefore restricted to at most [`MAX_VERTICES`]
//! vertices; the general problem is far beyond desk scale.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::graph::{Graph, NodeId};
use crate::planner::AllocationPlan;

pub const MAX_VERTICES: usize = 20;

/// Search-depth bound used when no explicit cap is given.
pub fn default_time_cap(n: usize) -> usize {
    4 * n
}

/// A DAG in compact form: vertices `0..n`, deduplicated predecessor lists,
/// and the output vertices the game must pebble.
#[derive(Clone, Debug)]
pub struct PebbleDag {
    n: usize,
    preds: Vec<Vec<usize>>,
    outputs: Vec<usize>,
}

#[derive(Debug, Error)]
pub enum PebbleError {
    #[error("{n} vertices exceed the exact-search limit of {max}")]
    TooManyVertices { n: usize, max: usize },
    #[error("vertex {0} out of range")]
    BadVertex(usize),
    #[error("the DAG has no outputs")]
    NoOutputs,
    #[error("edge list contains a cycle")]
    Cyclic,
    #[error("block-count certification needs uniform node sizes")]
    NonUniformSizes,
    #[error("move {index} is illegal: {reason}")]
    IllegalMove { index: usize, reason: String },
    #[error("strategy never pebbles every output")]
    GoalNotReached,
}

impl PebbleDag {
    pub fn new(n: usize, edges: &[(usize, usize)], outputs: &[usize]) -> Result<Self, PebbleError> {
        if n > MAX_VERTICES {
            return Err(PebbleError::TooManyVertices { n, max: MAX_VERTICES });
        }
        if outputs.is_empty() {
            return Err(PebbleError::NoOutputs);
        }
        let mut preds = vec![Vec::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(PebbleError::BadVertex(u.max(v)));
            }
            if !preds[v].contains(&u) {
                preds[v].push(u);
            }
        }
        for p in &mut preds {
            p.sort_unstable();
        }
        let mut outs = Vec::new();
        for &o in outputs {
            if o >= n {
                return Err(PebbleError::BadVertex(o));
            }
            if !outs.contains(&o) {
                outs.push(o);
            }
        }
        let dag = PebbleDag { n, preds, outputs: outs };
        dag.check_acyclic()?;
        Ok(dag)
    }

    /// Extracts the topology of a computation graph (operations are
    /// irrelevant to the game). Returns the DAG and the node id each compact
    /// vertex stands for.
    pub fn from_graph(graph: &Graph) -> Result<(Self, Vec<NodeId>), PebbleError> {
        let ids: Vec<NodeId> = graph.nodes().map(|n| n.id).collect();
        if ids.len() > MAX_VERTICES {
            return Err(PebbleError::TooManyVertices { n: ids.len(), max: MAX_VERTICES });
        }
        let index: BTreeMap<NodeId, usize> =
            ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut edges = Vec::new();
        for node in graph.nodes() {
            for &p in &node.preds {
                edges.push((index[&p], index[&node.id]));
            }
        }
        let outputs: Vec<usize> = graph.outputs().iter().map(|o| index[o]).collect();
        Ok((Self::new(ids.len(), &edges, &outputs)?, ids))
    }

    pub fn vertex_count(&self) -> usize {
        self.n
    }

    fn check_acyclic(&self) -> Result<(), PebbleError> {
        let mut indeg: Vec<usize> = self.preds.iter().map(Vec::len).collect();
        let mut succs = vec![Vec::new(); self.n];
        for (v, ps) in self.preds.iter().enumerate() {
            for &u in ps {
                succs[u].push(v);
            }
        }
        let mut queue: Vec<usize> = (0..self.n).filter(|&v| indeg[v] == 0).collect();
        let mut seen = 0;
        while let Some(v) = queue.pop() {
            seen += 1;
            for &w in &succs[v] {
                indeg[w] -= 1;
                if indeg[w] == 0 {
                    queue.push(w);
                }
            }
        }
        if seen == self.n {
            Ok(())
        } else {
            Err(PebbleError::Cyclic)
        }
    }

    fn pred_mask(&self, v: usize) -> u32 {
        self.preds[v].iter().fold(0, |m, &u| m | 1 << u)
    }

    fn goal_mask(&self) -> u32 {
        self.outputs.iter().fold(0, |m, &o| m | 1 << o)
    }

    /// Outputs plus all their ancestors; every one of them must be pebbled at
    /// least once by any winning strategy.
    fn needed_mask(&self) -> u32 {
        let mut mask = 0u32;
        let mut stack = self.outputs.clone();
        while let Some(v) = stack.pop() {
            if mask & (1 << v) != 0 {
                continue;
            }
            mask |= 1 << v;
            stack.extend(self.preds[v].iter().copied());
        }
        mask
    }

    /// Any strategy needs at least this many pebbles: all predecessors of a
    /// needed vertex are resident together right before it is pebbled.
    fn space_lower_bound(&self) -> usize {
        let needed = self.needed_mask();
        (0..self.n)
            .filter(|&v| needed & (1 << v) != 0)
            .map(|v| self.preds[v].len())
            .max()
            .unwrap_or(0)
            .max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Move {
    Place(usize),
    Slide { from: usize, to: usize },
    Remove(usize),
}

/// A legal move sequence with its cost: `space` is the running maximum of
/// resident pebbles, `time` the number of placements (slides included,
/// removals free).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Strategy {
    pub moves: Vec<Move>,
    pub space: usize,
    pub time: usize,
}

struct Search<'a> {
    dag: &'a PebbleDag,
    pred_masks: Vec<u32>,
    goal: u32,
    budget: usize,
    /// (pebbled, outputs-done) -> largest placement budget known insufficient
    memo: HashMap<(u32, u32), usize>,
}

impl Search<'_> {
    fn dfs(&mut self, pebbled: u32, done: u32, left: usize, moves: &mut Vec<Move>) -> bool {
        if done & self.goal == self.goal {
            return true;
        }
        if left == 0 {
            return false;
        }
        if let Some(&failed) = self.memo.get(&(pebbled, done)) {
            if left <= failed {
                return false;
            }
        }
        for v in 0..self.dag.n {
            let vb = 1u32 << v;
            if pebbled & vb != 0 {
                continue;
            }
            if self.pred_masks[v] & !pebbled != 0 {
                continue;
            }
            let nd = done | (vb & self.goal);
            if (pebbled.count_ones() as usize) < self.budget {
                moves.push(Move::Place(v));
                if self.dfs(pebbled | vb, nd, left - 1, moves) {
                    return true;
                }
                moves.pop();
            }
            for i in 0..self.dag.preds[v].len() {
                let u = self.dag.preds[v][i];
                moves.push(Move::Slide { from: u, to: v });
                if self.dfs((pebbled & !(1 << u)) | vb, nd, left - 1, moves) {
                    return true;
                }
                moves.pop();
            }
        }
        // removals are free; they strictly shrink the pebbled set
        for u in 0..self.dag.n {
            let ub = 1u32 << u;
            if pebbled & ub == 0 {
                continue;
            }
            moves.push(Move::Remove(u));
            if self.dfs(pebbled & !ub, done, left, moves) {
                return true;
            }
            moves.pop();
        }
        let entry = self.memo.entry((pebbled, done)).or_insert(0);
        *entry = (*entry).max(left);
        false
    }
}

/// Minimal time over all strategies using at most `space_budget` pebbles, as
/// an explicit strategy; `None` when no strategy stays within `time_cap`
/// placements. Iterative deepening over placements with memoised
/// pebbled-set states.
pub fn min_time_with_space(
    dag: &PebbleDag,
    space_budget: usize,
    time_cap: usize,
) -> Result<Option<Strategy>, PebbleError> {
    if space_budget < dag.space_lower_bound() {
        return Ok(None);
    }
    let mut search = Search {
        dag,
        pred_masks: (0..dag.n).map(|v| dag.pred_mask(v)).collect(),
        goal: dag.goal_mask(),
        budget: space_budget,
        memo: HashMap::new(),
    };
    let floor = dag.needed_mask().count_ones() as usize;
    for t in floor..=time_cap {
        let mut moves = Vec::new();
        if search.dfs(0, 0, t, &mut moves) {
            let (space, time) = check_strategy(dag, &moves)?;
            debug_assert_eq!(time, t, "iterative deepening finds minimal time first");
            return Ok(Some(Strategy { moves, space, time }));
        }
    }
    Ok(None)
}

/// Independent rule checker: replays `moves` and returns (space, time), or
/// the first illegality.
pub fn check_strategy(dag: &PebbleDag, moves: &[Move]) -> Result<(usize, usize), PebbleError> {
    let illegal = |index: usize, reason: &str| PebbleError::IllegalMove {
        index,
        reason: reason.to_string(),
    };
    let mut pebbled = 0u32;
    let mut done = 0u32;
    let goal = dag.goal_mask();
    let mut space = 0usize;
    let mut time = 0usize;
    for (i, mv) in moves.iter().enumerate() {
        match *mv {
            Move::Place(v) => {
                if v >= dag.n {
                    return Err(PebbleError::BadVertex(v));
                }
                if pebbled & (1 << v) != 0 {
                    return Err(illegal(i, "vertex already pebbled"));
                }
                if dag.pred_mask(v) & !pebbled != 0 {
                    return Err(illegal(i, "a predecessor is not pebbled"));
                }
                pebbled |= 1 << v;
                time += 1;
            }
            Move::Slide { from, to } => {
                if from >= dag.n || to >= dag.n {
                    return Err(PebbleError::BadVertex(from.max(to)));
                }
                if !dag.preds[to].contains(&from) {
                    return Err(illegal(i, "slide source is not a predecessor"));
                }
                if pebbled & (1 << to) != 0 {
                    return Err(illegal(i, "vertex already pebbled"));
                }
                if dag.pred_mask(to) & !pebbled != 0 {
                    return Err(illegal(i, "a predecessor is not pebbled"));
                }
                pebbled = (pebbled & !(1 << from)) | 1 << to;
                time += 1;
            }
            Move::Remove(v) => {
                if v >= dag.n {
                    return Err(PebbleError::BadVertex(v));
                }
                if pebbled & (1 << v) == 0 {
                    return Err(illegal(i, "no pebble to remove"));
                }
                pebbled &= !(1 << v);
            }
        }
        space = space.max(pebbled.count_ones() as usize);
        done |= pebbled & goal;
    }
    if done & goal != goal {
        return Err(PebbleError::GoalNotReached);
    }
    Ok((space, time))
}

/// All non-dominated (space, time) pairs achievable within `time_cap`
/// placements, sorted by space.
pub fn pareto_frontier(
    dag: &PebbleDag,
    time_cap: usize,
) -> Result<Vec<(usize, usize)>, PebbleError> {
    let floor = dag.needed_mask().count_ones() as usize;
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for k in dag.space_lower_bound()..=dag.n {
        if let Some(strategy) = min_time_with_space(dag, k, time_cap)? {
            pairs.push((strategy.space, strategy.time));
            if strategy.time == floor {
                break;
            }
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    let mut frontier = Vec::new();
    let mut best = usize::MAX;
    for (s, t) in pairs {
        if t < best {
            frontier.push((s, t));
            best = t;
        }
    }
    Ok(frontier)
}

/// Outcome of comparing a memory plan against the exact oracle on a
/// uniform-size graph. The mapping is stated explicitly because the two
/// models differ: the engine keeps vars, consts, outputs and update sources
/// resident for the whole run, the game may drop any pebble.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CertifyReport {
    pub pool_blocks: usize,
    pub external_slots: usize,
    /// pool_blocks + external_slots
    pub planner_pebbles: usize,
    /// Minimal space over strategies of minimal time (one placement per
    /// vertex).
    pub oracle_min_space: usize,
    pub minimal_time: usize,
    /// planner_pebbles - oracle_min_space; never negative, the oracle is
    /// optimal.
    pub gap: usize,
    pub mapping: &'static str,
}

pub const CERTIFY_MAPPING: &str = "planner pebbles = pool blocks + external var/const slots \
(keep semantics hold them resident); oracle = unrestricted pebble game where inputs cost one \
placement each and any pebble may be dropped";

/// Converts a plan's block usage into pebbles and reports it next to the
/// oracle's minimal space among time-minimal strategies.
pub fn certify_plan_space(
    graph: &Graph,
    plan: &AllocationPlan,
    sizes: &BTreeMap<NodeId, u64>,
) -> Result<CertifyReport, PebbleError> {
    let mut uniform = None;
    for &s in sizes.values() {
        match uniform {
            None => uniform = Some(s),
            Some(u) if u == s => {}
            Some(_) => return Err(PebbleError::NonUniformSizes),
        }
    }
    let (dag, _) = PebbleDag::from_graph(graph)?;
    let cap = default_time_cap(dag.n);
    let minimal_time = dag.needed_mask().count_ones() as usize;
    let mut oracle = None;
    for k in dag.space_lower_bound()..=dag.n {
        if let Some(strategy) = min_time_with_space(&dag, k, cap)? {
            if strategy.time == minimal_time {
                oracle = Some(strategy.space);
                break;
            }
        }
    }
    let oracle_min_space = oracle.expect("pebbling in topological order with n pebbles is time-minimal");
    let pool_blocks = plan.block_sizes.len();
    let external_slots = plan.external.len();
    let planner_pebbles = pool_blocks + external_slots;
    Ok(CertifyReport {
        pool_blocks,
        external_slots,
        planner_pebbles,
        oracle_min_space,
        minimal_time,
        gap: planner_pebbles - oracle_min_space,
        mapping: CERTIFY_MAPPING,
    })
}

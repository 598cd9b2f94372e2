//! The on-disk JSON graph format and canonical serialisation.
//!
//! A graph file is an object with `nodes`, `inputs`, `outputs`, `iopairs`,
//! `shapes` (declared input shapes) and `values` (tensor literals for var and
//! const nodes). Nodes must be listed in strictly ascending id order with
//! predecessors appearing before their consumers; this is exactly what the
//! writer emits, so files round-trip byte-stably after canonicalisation
//! (sorted object keys, shortest round-trip float formatting).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, GraphError, NodeId, OpKind};
use crate::planner::{AllocationPlan, BlockId};
use crate::shape::Shape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: NodeId,
    #[serde(flatten)]
    pub op: OpKind,
    #[serde(default)]
    pub preds: Vec<NodeId>,
}

/// Serialised form of a graph plus the shape hints and tensor literals the
/// engine needs to plan and evaluate it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphFile {
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub inputs: Vec<NodeId>,
    #[serde(default)]
    pub outputs: Vec<NodeId>,
    #[serde(default)]
    pub iopairs: Vec<(NodeId, NodeId)>,
    #[serde(default)]
    pub shapes: BTreeMap<NodeId, Shape>,
    #[serde(default)]
    pub values: BTreeMap<NodeId, Tensor>,
}

/// Serialised form of an [`AllocationPlan`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlanFile {
    pub assignment: BTreeMap<NodeId, BlockId>,
    pub block_sizes: BTreeMap<BlockId, u64>,
    pub external: Vec<NodeId>,
    pub peak_bytes: u64,
}

/// Map of tensor literals keyed by node id; the `--inputs` file format.
pub type InputsFile = BTreeMap<NodeId, Tensor>;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("graph: {0}")]
    Graph(#[from] GraphError),
    #[error("values entry {0} does not name a var or const node")]
    ValueTarget(NodeId),
    #[error("shapes entry {0} does not name a node")]
    ShapeTarget(NodeId),
}

/// Renders any serialisable value as canonical JSON: object keys sorted,
/// floats in shortest round-trip form, two-space indentation, trailing
/// newline. Identical values always produce identical bytes.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String, FormatError> {
    let v: serde_json::Value = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

pub fn graph_to_file(graph: &Graph, shape_hints: &BTreeMap<NodeId, Shape>) -> GraphFile {
    let nodes = graph
        .nodes()
        .map(|n| NodeSpec { id: n.id, op: n.op.clone(), preds: n.preds.clone() })
        .collect();
    let values = graph
        .nodes()
        .filter_map(|n| n.value.as_ref().map(|v| (n.id, v.clone())))
        .collect();
    let shapes = shape_hints
        .iter()
        .filter(|(id, _)| graph.get(**id).is_some())
        .map(|(&id, s)| (id, s.clone()))
        .collect();
    GraphFile {
        nodes,
        inputs: graph.inputs().to_vec(),
        outputs: graph.outputs().to_vec(),
        iopairs: graph.iopairs().to_vec(),
        shapes,
        values,
    }
}

/// Builds a graph from its file form. Returns the graph and the declared
/// shape hints (used as `infer_shapes` input).
pub fn graph_from_file(file: &GraphFile) -> Result<(Graph, BTreeMap<NodeId, Shape>), FormatError> {
    let mut graph = Graph::new();
    for spec in &file.nodes {
        graph.insert_node_raw(spec.id, spec.op.clone(), spec.preds.clone())?;
    }
    graph.set_inputs(file.inputs.clone())?;
    graph.set_outputs(file.outputs.clone())?;
    for &(s, t) in &file.iopairs {
        graph.add_iopair(s, t)?;
    }
    for (&id, tensor) in &file.values {
        match graph.get(id).map(|n| &n.op) {
            Some(OpKind::Var | OpKind::Const) => graph.set_value(id, tensor.clone())?,
            _ => return Err(FormatError::ValueTarget(id)),
        }
    }
    for &id in file.shapes.keys() {
        if graph.get(id).is_none() {
            return Err(FormatError::ShapeTarget(id));
        }
    }
    Ok((graph, file.shapes.clone()))
}

pub fn parse_graph_json(text: &str) -> Result<(Graph, BTreeMap<NodeId, Shape>), FormatError> {
    let file: GraphFile = serde_json::from_str(text)?;
    graph_from_file(&file)
}

pub fn plan_to_file(plan: &AllocationPlan) -> PlanFile {
    PlanFile {
        assignment: plan.assignment.clone(),
        block_sizes: plan
            .block_sizes
            .iter()
            .enumerate()
            .map(|(i, &s)| (BlockId(i as u32), s))
            .collect(),
        external: plan.external.iter().copied().collect(),
        peak_bytes: plan.peak_bytes,
    }
}

//! Shapes and shape inference.
//!
//! Users declare the shapes of graph inputs; everything else is inferred by
//! propagating per-operation rules in dependency order, so that the byte size
//! of every node is known before any value is computed. The planner and the
//! evaluator both read sizes from the [`ShapeTable`] produced here.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, NodeId, OpKind};

/// Bytes per element. The engine computes in 64-bit reals throughout.
pub const ELEMENT_BYTES: u64 = 8;

/// Dimension extents of a dense tensor, outermost first.
///
/// The empty list is a scalar. Extents are always at least 1; zero-sized
/// nodes are not representable.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: Vec<usize>) -> Result<Self, ShapeError> {
        if dims.contains(&0) {
            return Err(ShapeError::ZeroExtent { dims });
        }
        Ok(Shape(dims))
    }

    /// Builder shorthand; panics on a zero extent.
    pub fn of(dims: &[usize]) -> Self {
        Self::new(dims.to_vec()).expect("zero extent in shape literal")
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn size_bytes(&self) -> u64 {
        self.numel() as u64 * ELEMENT_BYTES
    }

    pub fn is_scalar(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = ShapeError;
    fn try_from(dims: Vec<usize>) -> Result<Self, ShapeError> {
        Shape::new(dims)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(s: Shape) -> Vec<usize> {
        s.0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("shape {dims:?} has a zero extent")]
    ZeroExtent { dims: Vec<usize> },
    #[error("shapes {lhs} and {rhs} do not broadcast (axis {axis} from the right)")]
    BroadcastMismatch { lhs: Shape, rhs: Shape, axis: usize },
    #[error("node {node}: no shape available (missing input shape or stored value)")]
    MissingSource { node: NodeId },
    #[error("node {node}: declared shape {declared} conflicts with stored value shape {stored}")]
    SourceConflict { node: NodeId, declared: Shape, stored: Shape },
    #[error("node {node}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { node: NodeId, axis: usize, rank: usize },
    #[error("node {node}: matmul needs [m,k] x [k,n], got {lhs} x {rhs}")]
    MatMulMismatch { node: NodeId, lhs: Shape, rhs: Shape },
    #[error("node {node}: reshape from {from} ({from_numel} elements) to {to} ({to_numel} elements)")]
    ReshapeCount { node: NodeId, from: Shape, to: Shape, from_numel: usize, to_numel: usize },
    #[error("node {node}: adagrad state shape {state} does not broadcast into gradient shape {grad}")]
    AdagradShape { node: NodeId, grad: Shape, state: Shape },
    #[error("node {node}: {source}")]
    AtNode { node: NodeId, source: Box<ShapeError> },
}

impl ShapeError {
    fn at(self, node: NodeId) -> ShapeError {
        match self {
            // already carries a node
            e @ (ShapeError::MissingSource { .. }
            | ShapeError::SourceConflict { .. }
            | ShapeError::AxisOutOfRange { .. }
            | ShapeError::MatMulMismatch { .. }
            | ShapeError::ReshapeCount { .. }
            | ShapeError::AdagradShape { .. }
            | ShapeError::AtNode { .. }) => e,
            e => ShapeError::AtNode { node, source: Box::new(e) },
        }
    }
}

/// Standard trailing-dimension broadcasting: shapes are aligned at their last
/// axis and each axis pair must be equal or contain a 1.
pub fn broadcast_shape(a: &Shape, b: &Shape) -> Result<Shape, ShapeError> {
    let (ad, bd) = (a.dims(), b.dims());
    let rank = ad.len().max(bd.len());
    let mut out = vec![0usize; rank];
    for k in 1..=rank {
        let x = if k <= ad.len() { ad[ad.len() - k] } else { 1 };
        let y = if k <= bd.len() { bd[bd.len() - k] } else { 1 };
        out[rank - k] = if x == y {
            x
        } else if x == 1 {
            y
        } else if y == 1 {
            x
        } else {
            return Err(ShapeError::BroadcastMismatch { lhs: a.clone(), rhs: b.clone(), axis: k - 1 });
        };
    }
    Ok(Shape(out))
}

/// Inferred shape of every node, keyed by node id.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ShapeTable {
    shapes: BTreeMap<NodeId, Shape>,
}

impl ShapeTable {
    pub fn get(&self, id: NodeId) -> Option<&Shape> {
        self.shapes.get(&id)
    }

    pub fn size_bytes(&self, id: NodeId) -> Option<u64> {
        self.shapes.get(&id).map(Shape::size_bytes)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Shape)> {
        self.shapes.iter().map(|(&id, s)| (id, s))
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    /// Byte size of every node; the single source of truth shared by the
    /// planner and the evaluator.
    pub fn sizes(&self) -> BTreeMap<NodeId, u64> {
        self.shapes.iter().map(|(&id, s)| (id, s.size_bytes())).collect()
    }
}

/// Shape rule for one operation given its predecessors' shapes.
pub(crate) fn infer_op(id: NodeId, op: &OpKind, preds: &[&Shape]) -> Result<Shape, ShapeError> {
    use OpKind::*;
    Ok(match op {
        Var | Const => unreachable!("sources are resolved by infer_shapes"),
        Add | Sub | Mul | Div | Pow => broadcast_shape(preds[0], preds[1]).map_err(|e| e.at(id))?,
        Neg | Sin | Cos | Exp | Sqrt | ScalarAdd { .. } | ScalarMul { .. } => preds[0].clone(),
        Sum { axis } => match axis {
            None => Shape::scalar(),
            Some(ax) => {
                let rank = preds[0].rank();
                if *ax >= rank {
                    return Err(ShapeError::AxisOutOfRange { node: id, axis: *ax, rank });
                }
                let mut dims = preds[0].dims().to_vec();
                dims.remove(*ax);
                Shape(dims)
            }
        },
        MatMul => {
            let (l, r) = (preds[0], preds[1]);
            if l.rank() != 2 || r.rank() != 2 || l.dims()[1] != r.dims()[0] {
                return Err(ShapeError::MatMulMismatch { node: id, lhs: l.clone(), rhs: r.clone() });
            }
            Shape(vec![l.dims()[0], r.dims()[1]])
        }
        Reshape { target } => {
            let from = preds[0];
            if from.numel() != target.numel() {
                return Err(ShapeError::ReshapeCount {
                    node: id,
                    from: from.clone(),
                    to: target.clone(),
                    from_numel: from.numel(),
                    to_numel: target.numel(),
                });
            }
            target.clone()
        }
        Repeat { axis, count } => {
            let rank = preds[0].rank();
            if *axis >= rank {
                return Err(ShapeError::AxisOutOfRange { node: id, axis: *axis, rank });
            }
            let mut dims = preds[0].dims().to_vec();
            dims[*axis] *= count;
            Shape(dims)
        }
        Fma => {
            let ab = broadcast_shape(preds[0], preds[1]).map_err(|e| e.at(id))?;
            broadcast_shape(&ab, preds[2]).map_err(|e| e.at(id))?
        }
        FusedAdagrad { .. } => {
            let (g, s) = (preds[0], preds[1]);
            match broadcast_shape(g, s) {
                Ok(b) if &b == g => g.clone(),
                _ => {
                    return Err(ShapeError::AdagradShape { node: id, grad: g.clone(), state: s.clone() })
                }
            }
        }
        Delay { out_shape, .. } => out_shape.clone(),
    })
}

/// Propagates shapes from the inputs to every node.
///
/// `input_shapes` supplies shapes for `Var`/`Const` nodes that do not carry a
/// stored value; a stored value's shape is used otherwise. Declaring a shape
/// that conflicts with a stored value is an error.
pub fn infer_shapes(
    graph: &Graph,
    input_shapes: &BTreeMap<NodeId, Shape>,
) -> Result<ShapeTable, ShapeError> {
    let mut table = ShapeTable::default();
    // Predecessors always carry smaller ids, so one ascending pass is total.
    for node in graph.nodes() {
        let shape = match node.op {
            OpKind::Var | OpKind::Const => {
                let declared = input_shapes.get(&node.id);
                let stored = node.value.as_ref().map(|t| t.shape());
                match (declared, stored) {
                    (Some(d), Some(s)) if d != s => {
                        return Err(ShapeError::SourceConflict {
                            node: node.id,
                            declared: d.clone(),
                            stored: s.clone(),
                        })
                    }
                    (Some(d), _) => d.clone(),
                    (None, Some(s)) => s.clone(),
                    (None, None) => return Err(ShapeError::MissingSource { node: node.id }),
                }
            }
            ref op => {
                let preds: Vec<&Shape> = node
                    .preds
                    .iter()
                    .map(|p| table.get(*p).expect("predecessor shape inferred first"))
                    .collect();
                infer_op(node.id, op, &preds)?
            }
        };
        table.shapes.insert(node.id, shape);
    }
    Ok(table)
}

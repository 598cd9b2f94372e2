//! A static lazy computation-graph engine for dense tensors.
//!
//! Programs are written as dataflow graphs over 64-bit real tensors. Once a
//! graph is built it does not change: shapes are inferred from the declared
//! input shapes, structural rewrites shrink the graph (constant folding,
//! identity elimination, FMA and AdaGrad fusion), a planner assigns every
//! node a share of a small set of reusable memory blocks, and the evaluator
//! executes the plan on CPU with all storage preallocated. An exact
//! pebble-game solver certifies the planner's footprint on small graphs.
//!
//! The typical pipeline:
//!
//! ```
//! use lazygraph::{Graph, OpKind, Shape, Tensor};
//! use std::collections::BTreeMap;
//!
//! let mut g = Graph::new();
//! let x = g.add_var().unwrap();
//! let two = g.add_const(Tensor::scalar(2.0)).unwrap();
//! let y = g.add_node(OpKind::Mul, vec![x, two]).unwrap();
//! g.set_inputs(vec![x]).unwrap();
//! g.set_outputs(vec![y]).unwrap();
//!
//! let mut hints = BTreeMap::new();
//! hints.insert(x, Shape::of(&[3]));
//! let shapes = lazygraph::infer_shapes(&g, &hints).unwrap();
//! let order = g.topological_order().unwrap();
//! let plan = lazygraph::plan(&g, &order, &shapes.sizes()).unwrap();
//!
//! let mut inputs = BTreeMap::new();
//! inputs.insert(x, Tensor::new(Shape::of(&[3]), vec![1.0, 2.0, 3.0]).unwrap());
//! let out = lazygraph::evaluate(&g, &plan, &inputs).unwrap();
//! assert_eq!(out[&y].data(), &[2.0, 4.0, 6.0]);
//! ```

pub mod eval;
pub mod gen;
pub mod graph;
pub mod json;
pub mod optimiser;
pub mod pebble;
pub mod planner;
pub mod shape;
pub mod tensor;

pub use eval::{eager_evaluate, evaluate, DelayRegistry, EvalError, EvalOptions};
pub use graph::{Graph, GraphError, Node, NodeId, OpKind, TopoOrder, Violation};
pub use json::{graph_from_file, graph_to_file, parse_graph_json, to_canonical_json, GraphFile};
pub use optimiser::{optimise, RewriteReport};
pub use planner::{plan, validate_plan, AllocationPlan, BlockId, PlanError};
pub use shape::{broadcast_shape, infer_shapes, Shape, ShapeError, ShapeTable};
pub use tensor::{approx_eq, Tensor};

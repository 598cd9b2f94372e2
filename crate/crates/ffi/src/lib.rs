//! C ABI for the lazygraph engine.
//!
//! Graphs travel as JSON (the same format the CLI reads) and live behind
//! opaque handles. Every function returns an [`LgStatus`]; on failure the
//! message is retrievable with [`lg_last_error`] until the next failing call
//! on the same thread. Strings returned through out-parameters are owned by
//! the caller and must be released with [`lg_string_free`].

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use lazygraph::eval::{evaluate_with, DelayRegistry, EvalOptions};
use lazygraph::json;
use lazygraph::pebble::{self, PebbleDag};
use lazygraph::{infer_shapes, optimise, plan, Graph, NodeId, Shape, Tensor};

/// Status of one FFI call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LgStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    InvalidGraph = 4,
    ShapeError = 5,
    PlanError = 6,
    EvalError = 7,
    PebbleError = 8,
    InternalPanic = 9,
}

/// Opaque graph handle: the graph plus its declared input shapes.
pub struct LgGraph {
    graph: Graph,
    hints: BTreeMap<NodeId, Shape>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn fail(status: LgStatus, message: impl std::fmt::Display) -> LgStatus {
    let text = CString::new(message.to_string().replace('\0', " "))
        .unwrap_or_else(|_| CString::new("error").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(text));
    status
}

fn guarded(body: impl FnOnce() -> LgStatus) -> LgStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(LgStatus::InternalPanic, "internal panic"),
    }
}

/// Message of the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn lg_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr())
    })
}

/// Frees a string returned by any `lg_*` out-parameter.
///
/// # Safety
/// `s` must be a pointer previously returned by this library and not yet
/// freed; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn lg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

unsafe fn read_utf8<'a>(ptr: *const c_char) -> Result<&'a str, LgStatus> {
    if ptr.is_null() {
        return Err(fail(LgStatus::NullArgument, "null string argument"));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|e| fail(LgStatus::InvalidUtf8, format!("invalid utf-8: {e}")))
}

fn give_string(out: *mut *mut c_char, text: String) -> LgStatus {
    let c = match CString::new(text) {
        Ok(c) => c,
        Err(e) => return fail(LgStatus::InternalPanic, format!("interior nul: {e}")),
    };
    unsafe { *out = c.into_raw() };
    LgStatus::Ok
}

/// Parses a graph from JSON (the CLI's graph format).
///
/// # Safety
/// `json` must be a valid NUL-terminated string and `out` a valid location to
/// store the new handle. Free the handle with [`lg_graph_free`].
#[no_mangle]
pub unsafe extern "C" fn lg_graph_from_json(
    json_text: *const c_char,
    out: *mut *mut LgGraph,
) -> LgStatus {
    guarded(|| {
        if out.is_null() {
            return fail(LgStatus::NullArgument, "null out pointer");
        }
        let text = match read_utf8(json_text) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match json::parse_graph_json(text) {
            Ok((graph, hints)) => {
                *out = Box::into_raw(Box::new(LgGraph { graph, hints }));
                LgStatus::Ok
            }
            Err(e) => fail(LgStatus::ParseError, e),
        }
    })
}

/// Releases a graph handle; null is ignored.
///
/// # Safety
/// `g` must come from [`lg_graph_from_json`] or [`lg_graph_optimise`] and not
/// be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lg_graph_free(g: *mut LgGraph) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Number of live nodes; 0 for a null handle.
///
/// # Safety
/// `g` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn lg_graph_node_count(g: *const LgGraph) -> u64 {
    g.as_ref().map_or(0, |h| h.graph.node_count() as u64)
}

macro_rules! take_handle {
    ($g:expr) => {
        match $g.as_ref() {
            Some(h) => h,
            None => return fail(LgStatus::NullArgument, "null graph handle"),
        }
    };
}

/// Checks graph invariants. `Ok` when clean; `InvalidGraph` with one
/// violation per line in `out_report` otherwise.
///
/// # Safety
/// `g` must be a live handle; `out_report` may be null when the caller only
/// wants the status.
#[no_mangle]
pub unsafe extern "C" fn lg_graph_validate(
    g: *const LgGraph,
    out_report: *mut *mut c_char,
) -> LgStatus {
    guarded(|| {
        let handle = take_handle!(g);
        let violations = handle.graph.validate();
        if violations.is_empty() {
            if !out_report.is_null() {
                return give_string(out_report, "ok".to_string());
            }
            return LgStatus::Ok;
        }
        let report =
            violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("\n");
        if !out_report.is_null() {
            let status = give_string(out_report, report.clone());
            if status != LgStatus::Ok {
                return status;
            }
        }
        fail(LgStatus::InvalidGraph, report.replace('\n', "; "))
    })
}

/// Serialises the graph back to canonical JSON.
///
/// # Safety
/// `g` live handle, `out` valid location; free the string with
/// [`lg_string_free`].
#[no_mangle]
pub unsafe extern "C" fn lg_graph_to_json(
    g: *const LgGraph,
    out: *mut *mut c_char,
) -> LgStatus {
    guarded(|| {
        let handle = take_handle!(g);
        if out.is_null() {
            return fail(LgStatus::NullArgument, "null out pointer");
        }
        let file = json::graph_to_file(&handle.graph, &handle.hints);
        match json::to_canonical_json(&file) {
            Ok(text) => give_string(out, text),
            Err(e) => fail(LgStatus::ParseError, e),
        }
    })
}

/// Renders the graph in DOT form.
///
/// # Safety
/// As [`lg_graph_to_json`].
#[no_mangle]
pub unsafe extern "C" fn lg_graph_to_dot(g: *const LgGraph, out: *mut *mut c_char) -> LgStatus {
    guarded(|| {
        let handle = take_handle!(g);
        if out.is_null() {
            return fail(LgStatus::NullArgument, "null out pointer");
        }
        give_string(out, handle.graph.to_dot())
    })
}

/// Rewrites the graph to fixpoint and returns a new handle; the input handle
/// stays valid. `out_report` (optional) receives a JSON object with the
/// rewrite counters.
///
/// # Safety
/// `g` live handle; `out` valid location; `out_report` may be null.
#[no_mangle]
pub unsafe extern "C" fn lg_graph_optimise(
    g: *const LgGraph,
    out: *mut *mut LgGraph,
    out_report: *mut *mut c_char,
) -> LgStatus {
    guarded(|| {
        let handle = take_handle!(g);
        if out.is_null() {
            return fail(LgStatus::NullArgument, "null out pointer");
        }
        let table = match infer_shapes(&handle.graph, &handle.hints) {
            Ok(t) => t,
            Err(e) => return fail(LgStatus::ShapeError, e),
        };
        let (rewritten, report) = match optimise(&handle.graph, &table) {
            Ok(r) => r,
            Err(e) => return fail(LgStatus::EvalError, e),
        };
        if !out_report.is_null() {
            let text = format!(
                "{{\"nodes_removed\":{},\"nodes_fused\":{},\"constants_folded\":{},\"rewrites\":{}}}",
                report.nodes_removed, report.nodes_fused, report.constants_folded, report.rewrites
            );
            let status = give_string(out_report, text);
            if status != LgStatus::Ok {
                return status;
            }
        }
        *out = Box::into_raw(Box::new(LgGraph {
            graph: rewritten,
            hints: handle.hints.clone(),
        }));
        LgStatus::Ok
    })
}

fn plan_of(handle: &LgGraph) -> Result<(lazygraph::AllocationPlan, BTreeMap<NodeId, u64>), (LgStatus, String)> {
    let table = infer_shapes(&handle.graph, &handle.hints)
        .map_err(|e| (LgStatus::ShapeError, e.to_string()))?;
    let order = handle
        .graph
        .topological_order()
        .map_err(|e| (LgStatus::InvalidGraph, e.to_string()))?;
    let sizes = table.sizes();
    let plan = plan(&handle.graph, &order, &sizes)
        .map_err(|e| (LgStatus::PlanError, e.to_string()))?;
    Ok((plan, sizes))
}

/// Infers shapes, orders the graph and returns the memory plan as JSON
/// (`assignment`, `block_sizes`, `external`, `peak_bytes`).
///
/// # Safety
/// As [`lg_graph_to_json`].
#[no_mangle]
pub unsafe extern "C" fn lg_graph_plan_json(
    g: *const LgGraph,
    out: *mut *mut c_char,
) -> LgStatus {
    guarded(|| {
        let handle = take_handle!(g);
        if out.is_null() {
            return fail(LgStatus::NullArgument, "null out pointer");
        }
        let (plan, _) = match plan_of(handle) {
            Ok(p) => p,
            Err((status, msg)) => return fail(status, msg),
        };
        match json::to_canonical_json(&json::plan_to_file(&plan)) {
            Ok(text) => give_string(out, text),
            Err(e) => fail(LgStatus::ParseError, e),
        }
    })
}

/// Plans and evaluates the graph. `inputs_json` (optional) is a JSON map of
/// node id to tensor literal; outputs come back the same way.
///
/// # Safety
/// `g` live handle; `inputs_json` null or NUL-terminated; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn lg_graph_eval_json(
    g: *const LgGraph,
    inputs_json: *const c_char,
    out: *mut *mut c_char,
) -> LgStatus {
    guarded(|| {
        let handle = take_handle!(g);
        if out.is_null() {
            return fail(LgStatus::NullArgument, "null out pointer");
        }
        let inputs: BTreeMap<NodeId, Tensor> = if inputs_json.is_null() {
            BTreeMap::new()
        } else {
            let text = match read_utf8(inputs_json) {
                Ok(t) => t,
                Err(s) => return s,
            };
            match serde_json::from_str(text) {
                Ok(m) => m,
                Err(e) => return fail(LgStatus::ParseError, e),
            }
        };
        let (plan, _) = match plan_of(handle) {
            Ok(p) => p,
            Err((status, msg)) => return fail(status, msg),
        };
        let values = match evaluate_with(
            &handle.graph,
            &plan,
            &inputs,
            &DelayRegistry::default(),
            &EvalOptions::default(),
        ) {
            Ok(v) => v,
            Err(e) => return fail(LgStatus::EvalError, e),
        };
        let outputs: BTreeMap<NodeId, Tensor> = values
            .into_iter()
            .filter(|(id, _)| handle.graph.is_output(*id))
            .collect();
        match json::to_canonical_json(&outputs) {
            Ok(text) => give_string(out, text),
            Err(e) => fail(LgStatus::ParseError, e),
        }
    })
}

/// Pebble-game Pareto frontier of the graph's topology as a JSON array of
/// [space, time] pairs sorted by space. `time_cap` 0 uses the default bound.
///
/// # Safety
/// As [`lg_graph_to_json`].
#[no_mangle]
pub unsafe extern "C" fn lg_graph_pebble_frontier(
    g: *const LgGraph,
    time_cap: u32,
    out: *mut *mut c_char,
) -> LgStatus {
    guarded(|| {
        let handle = take_handle!(g);
        if out.is_null() {
            return fail(LgStatus::NullArgument, "null out pointer");
        }
        let (dag, _) = match PebbleDag::from_graph(&handle.graph) {
            Ok(d) => d,
            Err(e) => return fail(LgStatus::PebbleError, e),
        };
        let cap = if time_cap == 0 {
            pebble::default_time_cap(dag.vertex_count())
        } else {
            time_cap as usize
        };
        match pebble::pareto_frontier(&dag, cap) {
            Ok(pairs) => {
                let body = pairs
                    .iter()
                    .map(|(s, t)| format!("[{s},{t}]"))
                    .collect::<Vec<_>>()
                    .join(",");
                give_string(out, format!("[{body}]"))
            }
            Err(e) => fail(LgStatus::PebbleError, e),
        }
    })
}

//! C ABI over `edge_influence`.
//!
//! Graphs and models are opaque handles created by `ei_*_load` /
//! `ei_*_new` and released with the matching `_free`. Every fallible call
//! returns an [`EiStatus`]; on failure the message is available through
//! [`ei_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use edge_influence::graph::{generate_graph, CandidateEdit, EditKind, GeneratorSpec, Graph};
use edge_influence::influence::{InfluenceEngine, LissaConfig};
use edge_influence::metrics::{evaluate_metric, EvalMetric};
use edge_influence::model::{Checkpoint, GcnConfig, GcnParams};
use edge_influence::train::{train, TrainConfig};
use edge_influence::{Error, GraphError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EiStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Schema = 4,
    InvalidEdit = 5,
    Config = 6,
    Numeric = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EiMetric {
    ValLoss = 0,
    Dirichlet = 1,
    /// Hop count equals the model depth.
    Oversquash = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EiEditKind {
    Delete = 0,
    Insert = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct EiEdit {
    pub u: usize,
    pub v: usize,
    pub kind: EiEditKind,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EiInfluence {
    pub param_shift: f64,
    pub msg_prop: f64,
    pub total: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct EiSolverConfig {
    pub damping: f64,
    pub max_iters: usize,
    pub tolerance: f64,
}

/// Opaque graph handle.
pub struct EiGraph {
    inner: Graph,
}

/// Opaque trained-model handle.
pub struct EiModel {
    inner: GcnParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> EiStatus {
    match err {
        Error::Io { .. } | Error::Graph(GraphError::Io { .. }) => EiStatus::Io,
        Error::Graph(GraphError::InvalidEdit { .. }) | Error::EditRow { .. } => EiStatus::InvalidEdit,
        Error::Graph(_) | Error::Json(_) | Error::Csv(_) => EiStatus::Schema,
        Error::Config(_) | Error::EmptyMask(_) => EiStatus::Config,
        Error::Diverged { .. } | Error::NonFinite(_) | Error::Degenerate(_) | Error::Diff(_) => EiStatus::Numeric,
    }
}

struct Fail(EiStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

impl From<GraphError> for Fail {
    fn from(e: GraphError) -> Self {
        Error::from(e).into()
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EiStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            EiStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            EiStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(EiStatus::NullPointer, format!("null {what}"))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|e| Fail(EiStatus::InvalidUtf8, e.to_string()))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn metric_of(m: EiMetric, model: &GcnParams) -> EvalMetric {
    match m {
        EiMetric::ValLoss => EvalMetric::ValidationLoss,
        EiMetric::Dirichlet => EvalMetric::DirichletEnergy,
        EiMetric::Oversquash => EvalMetric::oversquashing(model.config.layers),
    }
}

/// Message for the last failed call on this thread, or NULL. Valid until
/// the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn ei_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static, NUL-terminated version string.
#[no_mangle]
pub extern "C" fn ei_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ei_graph_load(path: *const c_char, out: *mut *mut EiGraph) -> EiStatus {
    guard(|| {
        let g = Graph::load(path_arg(path)?)?;
        put(out, EiGraph { inner: g })
    })
}

/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ei_graph_from_json(json: *const c_char, out: *mut *mut EiGraph) -> EiStatus {
    guard(|| {
        if json.is_null() {
            return Err(null("json"));
        }
        let text = CStr::from_ptr(json)
            .to_str()
            .map_err(|e| Fail(EiStatus::InvalidUtf8, e.to_string()))?;
        put(out, EiGraph { inner: Graph::from_json(text)? })
    })
}

/// Barbell graph: two `clique`-cliques joined by a path of `bridge` edges.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ei_graph_barbell(clique: usize, bridge: usize, seed: u64, out: *mut *mut EiGraph) -> EiStatus {
    guard(|| {
        let g = generate_graph(&GeneratorSpec::barbell(clique, bridge), seed)?;
        put(out, EiGraph { inner: g })
    })
}

/// Stochastic block model with `num_blocks` blocks of `block_size` nodes.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ei_graph_sbm(
    num_blocks: usize,
    block_size: usize,
    p_in: f64,
    p_out: f64,
    seed: u64,
    out: *mut *mut EiGraph,
) -> EiStatus {
    guard(|| {
        let g = generate_graph(&GeneratorSpec::sbm(vec![block_size; num_blocks], p_in, p_out), seed)?;
        put(out, EiGraph { inner: g })
    })
}

/// # Safety
/// `graph` must be NULL or a handle from this library.
#[no_mangle]
pub unsafe extern "C" fn ei_graph_num_nodes(graph: *const EiGraph) -> usize {
    graph.as_ref().map_or(0, |g| g.inner.num_nodes())
}

/// # Safety
/// `graph` must be NULL or a handle from this library.
#[no_mangle]
pub unsafe extern "C" fn ei_graph_num_edges(graph: *const EiGraph) -> usize {
    graph.as_ref().map_or(0, |g| g.inner.num_edges())
}

/// # Safety
/// `graph` must be NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ei_graph_free(graph: *mut EiGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ei_model_load(path: *const c_char, out: *mut *mut EiModel) -> EiStatus {
    guard(|| {
        let ck = Checkpoint::load(path_arg(path)?)?;
        put(out, EiModel { inner: ck.params()? })
    })
}

/// Trains a GCN with full-batch gradient descent.
///
/// # Safety
/// `graph` must be a handle from this library and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ei_model_train(
    graph: *const EiGraph,
    layers: usize,
    hidden: usize,
    epochs: usize,
    lr: f64,
    weight_decay: f64,
    seed: u64,
    out: *mut *mut EiModel,
) -> EiStatus {
    guard(|| {
        let g = &handle(graph, "graph")?.inner;
        let cfg = GcnConfig::for_graph(g, layers, hidden, seed);
        let tc = TrainConfig { lr, weight_decay, epochs, seed };
        let params = train(g, &cfg, &tc)?.params;
        put(out, EiModel { inner: params })
    })
}

/// # Safety
/// `model` must be a handle from this library, `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ei_model_save(model: *const EiModel, path: *const c_char) -> EiStatus {
    guard(|| {
        let m = &handle(model, "model")?.inner;
        let ck = Checkpoint {
            config: m.config.clone(),
            params: m.theta.clone(),
            training: None,
        };
        ck.save(path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from this library.
#[no_mangle]
pub unsafe extern "C" fn ei_model_num_params(model: *const EiModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.theta.len())
}

/// # Safety
/// `model` must be NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ei_model_free(model: *mut EiModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Evaluates `metric` for `model` on `graph`.
///
/// # Safety
/// Handles must come from this library and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ei_metric_value(
    graph: *const EiGraph,
    model: *const EiModel,
    metric: EiMetric,
    out: *mut f64,
) -> EiStatus {
    guard(|| {
        let g = &handle(graph, "graph")?.inner;
        let m = &handle(model, "model")?.inner;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        *out = evaluate_metric(metric_of(metric, m), m, g)?;
        Ok(())
    })
}

/// Predicted change of `metric` for each of `n` edits, written to
/// `out[0..n]`. `solver` may be NULL for the defaults.
///
/// # Safety
/// `edits` and `out` must each point to `n` elements; handles must come
/// from this library.
#[no_mangle]
pub unsafe extern "C" fn ei_influence(
    graph: *const EiGraph,
    model: *const EiModel,
    metric: EiMetric,
    edits: *const EiEdit,
    n: usize,
    solver: *const EiSolverConfig,
    out: *mut EiInfluence,
) -> EiStatus {
    guard(|| {
        let g = &handle(graph, "graph")?.inner;
        let m = &handle(model, "model")?.inner;
        if n == 0 {
            return Ok(());
        }
        if edits.is_null() {
            return Err(null("edits"));
        }
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let mut lissa = LissaConfig::default();
        if let Some(s) = solver.as_ref() {
            lissa.damping = s.damping;
            lissa.max_iters = s.max_iters;
            lissa.tolerance = s.tolerance;
        }
        let list: Vec<CandidateEdit> = std::slice::from_raw_parts(edits, n)
            .iter()
            .map(|e| {
                let kind = match e.kind {
                    EiEditKind::Delete => EditKind::Delete,
                    EiEditKind::Insert => EditKind::Insert,
                };
                CandidateEdit::new(e.u, e.v, kind)
            })
            .collect();
        for e in &list {
            g.validate_edit(e)?;
        }
        let rows = InfluenceEngine::new(g, m, &list)?.scan(&[metric_of(metric, m)], &list, &lissa)?;
        let dst = std::slice::from_raw_parts_mut(out, n);
        for (d, r) in dst.iter_mut().zip(rows) {
            *d = EiInfluence {
                param_shift: r.param_shift,
                msg_prop: r.msg_prop,
                total: r.total,
            };
        }
        Ok(())
    })
}

//! C ABI for the dpmpn library.
//!
//! All state lives behind opaque handles; functions return an error code
//! and the last error message is retrievable per thread via
//! [`dpmpn_last_error`]. Strings are NUL-terminated UTF-8. Every handle
//! returned by a `_new`/`_load` function must be released with the
//! matching `_free`.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use libc::{c_char, size_t};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dpmpn::agnn::QueryContext;
use dpmpn::checkpoint;
use dpmpn::config::Config;
use dpmpn::error::Error;
use dpmpn::eval::{self, KnownTrue};
use dpmpn::expand::{expansion_bound, Horizons};
use dpmpn::export::export_dot;
use dpmpn::graph::Dataset;
use dpmpn::model::{Dims, ModelParams};
use dpmpn::tensor::optim::AdamState;
use dpmpn::train::train_epoch;

/// Status codes returned by every fallible function.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpmpnStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Config = 5,
    Graph = 6,
    Shape = 7,
    Numeric = 8,
    Checkpoint = 9,
    Panic = 99,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let cleaned: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(cleaned).unwrap_or_default());
}

fn status_of(err: &Error) -> DpmpnStatus {
    match err {
        Error::Io { .. } => DpmpnStatus::Io,
        Error::Parse { .. } => DpmpnStatus::Parse,
        Error::Config(_) => DpmpnStatus::Config,
        Error::Graph(_) => DpmpnStatus::Graph,
        Error::Shape(_) => DpmpnStatus::Shape,
        Error::Numeric(_) => DpmpnStatus::Numeric,
        Error::Checkpoint(_) => DpmpnStatus::Checkpoint,
    }
}

fn fail(err: Error) -> DpmpnStatus {
    set_error(&err.to_string());
    status_of(&err)
}

fn guard(f: impl FnOnce() -> DpmpnStatus) -> DpmpnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("panic inside dpmpn");
            DpmpnStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be NULL or a valid NUL-terminated string.
unsafe fn cstr<'a>(ptr: *const c_char) -> Result<&'a str, DpmpnStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(DpmpnStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        DpmpnStatus::InvalidUtf8
    })
}

macro_rules! deref {
    ($ptr:expr) => {
        match unsafe { $ptr.as_ref() } {
            Some(r) => r,
            None => {
                set_error("null handle argument");
                return DpmpnStatus::NullArgument;
            }
        }
    };
}

macro_rules! deref_mut {
    ($ptr:expr) => {
        match unsafe { $ptr.as_mut() } {
            Some(r) => r,
            None => {
                set_error("null handle argument");
                return DpmpnStatus::NullArgument;
            }
        }
    };
}

/// Opaque configuration handle.
pub struct DpmpnConfig {
    inner: Config,
}

/// Opaque dataset handle: vocabulary, splits and the built graph.
pub struct DpmpnDataset {
    inner: Dataset,
}

/// Opaque model handle: parameters plus optimizer state.
pub struct DpmpnModel {
    params: ModelParams,
    opt: AdamState,
}

/// Aggregated ranking metrics.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DpmpnMetrics {
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub mrr: f64,
    pub n_queries: u64,
}

/// Copy the last error message on this thread into `buf` (truncated to
/// `len - 1` bytes, always NUL-terminated). Returns the full message
/// length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must point to `len` writable bytes, or be NULL (query mode).
#[no_mangle]
pub unsafe extern "C" fn dpmpn_last_error(buf: *mut c_char, len: size_t) -> size_t {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn dpmpn_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// New configuration with default settings.
#[no_mangle]
pub extern "C" fn dpmpn_config_new() -> *mut DpmpnConfig {
    Box::into_raw(Box::new(DpmpnConfig {
        inner: Config::default(),
    }))
}

/// Apply a `key = value` configuration file.
///
/// # Safety
/// `cfg` must be a live handle from [`dpmpn_config_new`]; `path` a valid
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dpmpn_config_load_file(
    cfg: *mut DpmpnConfig,
    path: *const c_char,
) -> DpmpnStatus {
    guard(|| {
        let cfg = match unsafe { cfg.as_mut() } {
            Some(c) => c,
            None => {
                set_error("null handle argument");
                return DpmpnStatus::NullArgument;
            }
        };
        let path = match unsafe { cstr(path) } {
            Ok(p) => p,
            Err(s) => return s,
        };
        match cfg.inner.apply_file(Path::new(path)) {
            Ok(()) => DpmpnStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Set one configuration key.
///
/// # Safety
/// `cfg` must be a live handle; `key` and `value` valid strings.
#[no_mangle]
pub unsafe extern "C" fn dpmpn_config_set(
    cfg: *mut DpmpnConfig,
    key: *const c_char,
    value: *const c_char,
) -> DpmpnStatus {
    let cfg = deref_mut!(cfg);
    let (key, value) = match (unsafe { cstr(key) }, unsafe { cstr(value) }) {
        (Ok(k), Ok(v)) => (k, v),
        (Err(s), _) | (_, Err(s)) => return s,
    };
    match cfg.inner.set(key, value) {
        Ok(()) => DpmpnStatus::Ok,
        Err(e) => fail(e),
    }
}

/// # Safety
/// `cfg` must be NULL or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn dpmpn_config_free(cfg: *mut DpmpnConfig) {
    if !cfg.is_null() {
        drop(unsafe { Box::from_raw(cfg) });
    }
}

/// Load the dataset named by the configuration's `train_path` /
/// `valid_path` / `test_path`. Returns NULL on failure.
///
/// # Safety
/// `cfg` must be a live configuration handle.
#[no_mangle]
pub unsafe extern "C" fn dpmpn_dataset_load(cfg: *const DpmpnConfig) -> *mut DpmpnDataset {
    let result = catch_unwind(AssertUnwindSafe(|| {
        let cfg = unsafe { cfg.as_ref() }?;
        let train = match &cfg.inner.train_path {
            Some(p) => p.clone(),
            None => {
                set_error("train_path is not configured");
                return None;
            }
        };
        match Dataset::load(
            &train,
            cfg.inner.valid_path.as_deref(),
            cfg.inner.test_path.as_deref(),
            cfg.inner.add_inverse,
        ) {
            Ok(ds) => Some(Box::into_raw(Box::new(DpmpnDataset { inner: ds }))),
            Err(e) => {
                fail(e);
                None
            }
        }
    }));
    match result {
        Ok(Some(ptr)) => ptr,
        Ok(None) => std::ptr::null_mut(),
        Err(_) => {
            set_error("panic inside dpmpn");
            std::ptr::null_mut()
        }
    }
}

/// # Safety
/// `ds` must be NULL or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn dpmpn_dataset_free(ds: *mut DpmpnDataset) {
    if !ds.is_null() {
        drop(unsafe { Box::from_raw(ds) });
    }
}

/// # Safety
/// `ds` must be a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn dpmpn_dataset_n_entities(ds: *const DpmpnDataset) -> u64 {
    unsafe { ds.as_ref() }.map_or(0, |d| d.inner.graph.n_entities() as u64)
}

/// Relation count after augmentation (inverse and self-loop included).
///
/// # Safety
/// `ds` must be a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn dpmpn_dataset_n_relations(ds: *const DpmpnDataset) -> u64 {
    unsafe { ds.as_ref() }.map_or(0, |d| d.inner.graph.n_relations() as u64)
}

/// # Safety
/// `ds` must be a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn dpmpn_dataset_n_edges(ds: *const DpmpnDataset) -> u64 {
    unsafe { ds.as_ref() }.map_or(0, |d| d.inner.graph.n_edges() as u64)
}

fn dims_for(cfg: &Config, ds: &Dataset) -> Dims {
    Dims {
        n_entities: ds.graph.n_entities(),
        n_relations: ds.graph.n_relations(),
        state: cfg.train.n_dims,
        attention: cfg.train.n_dims_att,
        hidden: cfg.train.hidden_dims(),
    }
}

fn wrap_model(params: ModelParams) -> *mut DpmpnModel {
    let opt = AdamState::new(&params.sizes());
    Box::into_raw(Box::new(DpmpnModel { params, opt }))
}

/// Fresh model initialized from the configuration seed. NULL on failure.
///
/// # Safety
/// `cfg` and `ds` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn dpmpn_model_new(
    cfg: *const DpmpnConfig,
    ds: *const DpmpnDataset,
) -> *mut DpmpnModel {
    let (Some(cfg), Some(ds)) = (unsafe { cfg.as_ref() }, unsafe { ds.as_ref() }) else {
        set_error("null handle argument");
        return std::ptr::null_mut();
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.inner.train.seed);
    let params = ModelParams::init(
        dims_for(&cfg.inner, &ds.inner),
        cfg.inner.train.init_scale,
        &mut rng,
    );
    wrap_model(params)
}

/// Load a checkpoint, validating its dimensions against the configuration
/// and dataset. NULL on failure.
///
/// # Safety
/// `cfg` and `ds` must be live handles; `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn dpmpn_model_load(
    cfg: *const DpmpnConfig,
    ds: *const DpmpnDataset,
    path: *const c_char,
) -> *mut DpmpnModel {
    let (Some(cfg), Some(ds)) = (unsafe { cfg.as_ref() }, unsafe { ds.as_ref() }) else {
        set_error("null handle argument");
        return std::ptr::null_mut();
    };
    let path = match unsafe { cstr(path) } {
        Ok(p) => PathBuf::from(p),
        Err(_) => return std::ptr::null_mut(),
    };
    match checkpoint::load_checked(&path, &dims_for(&cfg.inner, &ds.inner)) {
        Ok(params) => wrap_model(params),
        Err(e) => {
            fail(e);
            std::ptr::null_mut()
        }
    }
}

/// Write the model to a checkpoint file.
///
/// # Safety
/// `model` must be a live handle; `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn dpmpn_model_save(
    model: *const DpmpnModel,
    path: *const c_char,
) -> DpmpnStatus {
    let model = deref!(model);
    let path = match unsafe { cstr(path) } {
        Ok(p) => PathBuf::from(p),
        Err(s) => return s,
    };
    match checkpoint::save(&model.params, &path) {
        Ok(()) => DpmpnStatus::Ok,
        Err(e) => fail(e),
    }
}

/// # Safety
/// `model` must be NULL or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn dpmpn_model_free(model: *mut DpmpnModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Run one training epoch; writes the epoch mean loss to `mean_loss_out`
/// when non-NULL.
///
/// # Safety
/// `model`, `ds`, `cfg` must be live handles; `mean_loss_out` NULL or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn dpmpn_train_epoch(
    model: *mut DpmpnModel,
    ds: *const DpmpnDataset,
    cfg: *const DpmpnConfig,
    epoch: u32,
    mean_loss_out: *mut f32,
) -> DpmpnStatus {
    let model = deref_mut!(model);
    let ds = deref!(ds);
    let cfg = deref!(cfg);
    guard(|| {
        match train_epoch(
            &mut model.params,
            &mut model.opt,
            &ds.inner.graph,
            &ds.inner.train,
            &cfg.inner.train,
            epoch as usize,
            0,
        ) {
            Ok(log) => {
                if !mean_loss_out.is_null() {
                    unsafe { *mean_loss_out = log.mean_loss() };
                }
                DpmpnStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Filtered ranking metrics over a split ("train", "valid" or "test").
///
/// # Safety
/// Handles must be live; `split` a valid string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dpmpn_evaluate(
    model: *const DpmpnModel,
    ds: *const DpmpnDataset,
    cfg: *const DpmpnConfig,
    split: *const c_char,
    out: *mut DpmpnMetrics,
) -> DpmpnStatus {
    let model = deref!(model);
    let ds = deref!(ds);
    let cfg = deref!(cfg);
    if out.is_null() {
        set_error("null output argument");
        return DpmpnStatus::NullArgument;
    }
    let split = match unsafe { cstr(split) } {
        Ok(s) => s,
        Err(s) => return s,
    };
    guard(|| {
        let d = &ds.inner;
        let triples = match split {
            "train" => &d.train,
            "valid" => match &d.valid {
                Some(v) => v,
                None => return fail(Error::Config("no valid split loaded".into())),
            },
            "test" => match &d.test {
                Some(t) => t,
                None => return fail(Error::Config("no test split loaded".into())),
            },
            other => return fail(Error::Config(format!("unknown split '{other}'"))),
        };
        let mut splits: Vec<&dpmpn::graph::TripleSet> = vec![&d.train];
        splits.extend(d.valid.as_ref());
        splits.extend(d.test.as_ref());
        let known = KnownTrue::build(&splits, &d.graph);
        let queries = eval::eval_queries(triples, &d.graph);
        match eval::evaluate(&model.params, &d.graph, &queries, &known, &cfg.inner.train) {
            Ok(report) => {
                unsafe {
                    *out = DpmpnMetrics {
                        hits1: report.metrics.hits1,
                        hits3: report.metrics.hits3,
                        hits10: report.metrics.hits10,
                        mrr: report.metrics.mrr,
                        n_queries: report.records.len() as u64,
                    };
                }
                DpmpnStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Score a query and return its top-k predicted tails. `ids_out` and
/// `scores_out` must hold `k` elements; `n_out` receives how many were
/// written (fewer than `k` when the reached set is smaller).
///
/// # Safety
/// Handles must be live; `head`/`rel` valid strings; output buffers must
/// hold at least `k` elements.
#[no_mangle]
pub unsafe extern "C" fn dpmpn_predict_topk(
    model: *const DpmpnModel,
    ds: *const DpmpnDataset,
    cfg: *const DpmpnConfig,
    head: *const c_char,
    rel: *const c_char,
    k: size_t,
    ids_out: *mut u64,
    scores_out: *mut f32,
    n_out: *mut size_t,
) -> DpmpnStatus {
    let model = deref!(model);
    let ds = deref!(ds);
    let cfg = deref!(cfg);
    if ids_out.is_null() || scores_out.is_null() || n_out.is_null() {
        set_error("null output argument");
        return DpmpnStatus::NullArgument;
    }
    let (head, rel) = match (unsafe { cstr(head) }, unsafe { cstr(rel) }) {
        (Ok(h), Ok(r)) => (h, r),
        (Err(s), _) | (_, Err(s)) => return s,
    };
    guard(|| {
        let d = &ds.inner;
        let Some(head_id) = d.vocab.lookup_entity(head) else {
            return fail(Error::Graph(format!("unknown entity '{head}'")));
        };
        let Some(rel_id) = d.vocab.lookup_relation(rel) else {
            return fail(Error::Graph(format!("unknown relation '{rel}'")));
        };
        let scores = match eval::score_query(
            &model.params,
            &d.graph,
            QueryContext {
                head: head_id,
                rel: rel_id,
            },
            &cfg.inner.train,
            &[0xf1f1, head_id as u64, rel_id as u64],
        ) {
            Ok((scores, _)) => scores,
            Err(e) => return fail(e),
        };
        let mut ranked: Vec<(usize, f32)> = scores.into_iter().collect();
        ranked.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        let n = ranked.len().min(k);
        for (i, &(id, score)) in ranked.iter().take(n).enumerate() {
            unsafe {
                *ids_out.add(i) = id as u64;
                *scores_out.add(i) = score;
            }
        }
        unsafe { *n_out = n };
        DpmpnStatus::Ok
    })
}

/// Entity name for an id, written into `buf` (truncated, NUL-terminated).
/// Returns the full name length, or 0 for an out-of-range id.
///
/// # Safety
/// `ds` must be a live handle; `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn dpmpn_entity_name(
    ds: *const DpmpnDataset,
    id: u64,
    buf: *mut c_char,
    len: size_t,
) -> size_t {
    let Some(ds) = (unsafe { ds.as_ref() }) else {
        return 0;
    };
    if id as usize >= ds.inner.graph.n_entities() {
        return 0;
    }
    let name = ds.inner.vocab.entity_name(id as usize).as_bytes();
    if !buf.is_null() && len > 0 {
        let n = name.len().min(len - 1);
        unsafe {
            std::ptr::copy_nonoverlapping(name.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
    }
    name.len()
}

/// Run one query and write its attention subgraph as DOT to `path`.
///
/// # Safety
/// Handles must be live; `head`, `rel` and `path` valid strings.
#[no_mangle]
pub unsafe extern "C" fn dpmpn_export_dot(
    model: *const DpmpnModel,
    ds: *const DpmpnDataset,
    cfg: *const DpmpnConfig,
    head: *const c_char,
    rel: *const c_char,
    threshold: f32,
    path: *const c_char,
) -> DpmpnStatus {
    let model = deref!(model);
    let ds = deref!(ds);
    let cfg = deref!(cfg);
    let (head, rel, path) = match (unsafe { cstr(head) }, unsafe { cstr(rel) }, unsafe {
        cstr(path)
    }) {
        (Ok(h), Ok(r), Ok(p)) => (h, r, p),
        (Err(s), _, _) | (_, Err(s), _) | (_, _, Err(s)) => return s,
    };
    guard(|| {
        let d = &ds.inner;
        let Some(head_id) = d.vocab.lookup_entity(head) else {
            return fail(Error::Graph(format!("unknown entity '{head}'")));
        };
        let Some(rel_id) = d.vocab.lookup_relation(rel) else {
            return fail(Error::Graph(format!("unknown relation '{rel}'")));
        };
        let trace = match eval::score_query(
            &model.params,
            &d.graph,
            QueryContext {
                head: head_id,
                rel: rel_id,
            },
            &cfg.inner.train,
            &[0xd07, head_id as u64, rel_id as u64],
        ) {
            Ok((_, trace)) => trace,
            Err(e) => return fail(e),
        };
        let base = d.graph.n_base_relations();
        let entity_name = |id: usize| d.vocab.entity_name(id).to_string();
        let rel_name = |id: usize| {
            if id < base {
                d.vocab.relation_name(id).to_string()
            } else if d.graph.has_inverse() && id < 2 * base {
                format!("{}^-1", d.vocab.relation_name(id - base))
            } else {
                "<self>".to_string()
            }
        };
        let dot = export_dot(&trace, &entity_name, &rel_name, threshold);
        match std::fs::write(Path::new(path), dot) {
            Ok(()) => DpmpnStatus::Ok,
            Err(source) => fail(Error::Io {
                path: PathBuf::from(path),
                source,
            }),
        }
    })
}

/// Visited-subgraph size bound for the given horizons:
/// `1 + steps * min(from * per_node, to)`.
#[no_mangle]
pub extern "C" fn dpmpn_expansion_bound(
    max_attending_from: u64,
    max_sampling_per_node: u64,
    max_attending_to: u64,
    n_steps: u64,
) -> u64 {
    expansion_bound(&Horizons::new(
        max_attending_from as usize,
        max_sampling_per_node as usize,
        max_attending_to as usize,
        n_steps as usize,
    )) as u64
}

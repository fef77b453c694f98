//! C ABI over shillforge. Every function returns an [`SfStatus`]; on
//! failure [`sf_last_error`] describes what went wrong on the calling
//! thread. Graphs are opaque handles freed with [`sf_graph_free`]; strings
//! returned through out-parameters are freed with [`sf_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use shillforge::attack::{write_profiles, AttackError};
use shillforge::detect::{auc, DetectError};
use shillforge::evalrun::{
    generate_attack, pre_attack, prepare_seed, report_json, run_experiment, AttackKind, EvalError,
    ExperimentConfig,
};
use shillforge::graphdata::{load_csv, synthesize, write_csv, GraphError, RatingGraph, SyntheticSpec, DEFAULT_LEVELS};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfStatus {
    Ok = 0,
    /// A required pointer was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Malformed configuration or data.
    InvalidInput = 3,
    Io = 4,
    /// The computation itself failed.
    Failed = 5,
    /// Internal panic caught at the boundary.
    Panic = 6,
}

/// Opaque rating graph.
pub struct SfGraph(RatingGraph);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(SfStatus, String);

impl From<GraphError> for Failure {
    fn from(e: GraphError) -> Self {
        let status = match e {
            GraphError::Io(_) => SfStatus::Io,
            _ => SfStatus::InvalidInput,
        };
        Failure(status, e.to_string())
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        let status = match &e {
            EvalError::Config(_)
            | EvalError::Graph(GraphError::Validation(_) | GraphError::Parse { .. })
            | EvalError::Attack(AttackError::Config(_))
            | EvalError::Detect(DetectError::Validation(_)) => SfStatus::InvalidInput,
            EvalError::Graph(GraphError::Io(_)) => SfStatus::Io,
            _ => SfStatus::Failed,
        };
        Failure(status, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(SfStatus::InvalidInput, e.to_string())
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SfStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SfStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            SfStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(SfStatus::NullArgument, format!("`{name}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SfStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| Failure(SfStatus::Failed, "output contains a nul byte".into()))?;
    *out = c.into_raw();
    Ok(())
}

fn parse_config(json: &str) -> Result<ExperimentConfig, Failure> {
    let cfg: ExperimentConfig = serde_json::from_str(json)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Message for the last failed call on this thread, or null after a
/// successful call. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn sf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn sf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Generates a synthetic labeled rating graph.
///
/// # Safety
/// `out` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn sf_graph_synthesize(
    users: usize,
    items: usize,
    fake: usize,
    density: f64,
    seed: u64,
    out: *mut *mut SfGraph,
) -> SfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let g = synthesize(&SyntheticSpec::new(users, items, fake, density, seed))?;
        *out = Box::into_raw(Box::new(SfGraph(g)));
        Ok(())
    })
}

/// Loads a `user_id,item_id,rating,label` CSV with ratings in `1..=levels`.
/// Pass `levels = 0` for the default of 5.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sf_graph_load_csv(path: *const c_char, levels: u8, out: *mut *mut SfGraph) -> SfStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let levels = if levels == 0 { DEFAULT_LEVELS } else { levels };
        let loaded = load_csv(path, levels)?;
        *out = Box::into_raw(Box::new(SfGraph(loaded.graph)));
        Ok(())
    })
}

/// Writes a graph as CSV.
///
/// # Safety
/// `graph` must come from this library and `path` be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn sf_graph_write_csv(graph: *const SfGraph, path: *const c_char) -> SfStatus {
    guard(|| {
        let g = graph.as_ref().ok_or_else(|| null("graph"))?;
        let path = str_arg(path, "path")?;
        let file = std::fs::File::create(path).map_err(GraphError::from)?;
        write_csv(&g.0, std::io::BufWriter::new(file))?;
        Ok(())
    })
}

/// Number of users, items and ratings. Any out-pointer may be null.
///
/// # Safety
/// `graph` must come from this library; non-null out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn sf_graph_counts(
    graph: *const SfGraph,
    users: *mut usize,
    items: *mut usize,
    edges: *mut usize,
) -> SfStatus {
    guard(|| {
        let g = &graph.as_ref().ok_or_else(|| null("graph"))?.0;
        for (p, v) in [(users, g.n_users()), (items, g.n_items()), (edges, g.n_edges())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Frees a graph. Null is a no-op.
///
/// # Safety
/// `graph` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sf_graph_free(graph: *mut SfGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Runs every seed of an experiment described by a JSON configuration
/// (same keys as the TOML config) and returns the JSON report.
///
/// # Safety
/// `config_json` must be nul-terminated and `report_out` writable. The
/// returned string must be freed with [`sf_string_free`].
#[no_mangle]
pub unsafe extern "C" fn sf_run_experiment(config_json: *const c_char, report_out: *mut *mut c_char) -> SfStatus {
    guard(|| {
        let cfg = parse_config(str_arg(config_json, "config_json")?)?;
        if report_out.is_null() {
            return Err(null("report_out"));
        }
        let (report, _) = run_experiment(&cfg)?;
        put_string(report_out, report_json(&report)?)
    })
}

/// Generates injection profiles for one seed of a JSON configuration and
/// returns them as `fake_user_id,item_id,rating` CSV.
///
/// # Safety
/// `config_json` must be nul-terminated and `profiles_out` writable. The
/// returned string must be freed with [`sf_string_free`].
#[no_mangle]
pub unsafe extern "C" fn sf_attack(config_json: *const c_char, seed: u64, profiles_out: *mut *mut c_char) -> SfStatus {
    guard(|| {
        let cfg = parse_config(str_arg(config_json, "config_json")?)?;
        if profiles_out.is_null() {
            return Err(null("profiles_out"));
        }
        let prepared = prepare_seed(&cfg, seed)?;
        let clean = if cfg.attack == AttackKind::Metac && cfg.injection.warm_start {
            Some(pre_attack(&prepared, &cfg)?.model)
        } else {
            None
        };
        let (profiles, _) = generate_attack(&prepared, &cfg, clean.as_ref())?;
        let mut buf = Vec::new();
        write_profiles(&prepared.graph, &profiles, &mut buf).map_err(EvalError::from)?;
        put_string(profiles_out, String::from_utf8(buf).expect("csv output is UTF-8"))
    })
}

/// Area under the ROC curve of `scores` against `is_fake` (nonzero means
/// fake), with ties counted as one half.
///
/// # Safety
/// `scores` and `is_fake` must point to `n` readable elements; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sf_auc(scores: *const f64, is_fake: *const u8, n: usize, out: *mut f64) -> SfStatus {
    guard(|| {
        if scores.is_null() || is_fake.is_null() || out.is_null() {
            return Err(null("scores, is_fake or out"));
        }
        let s = std::slice::from_raw_parts(scores, n);
        let f: Vec<bool> = std::slice::from_raw_parts(is_fake, n).iter().map(|&b| b != 0).collect();
        *out = auc(s, &f).map_err(|e| Failure(SfStatus::InvalidInput, e.to_string()))?;
        Ok(())
    })
}

/// Frees a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

//! C ABI for dersite.
//!
//! Every call returns a [`DersiteStatus`]; on failure the message is kept per
//! thread and read with [`dersite_last_error`]. Handles are opaque and owned
//! by the caller until passed to the matching `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dersite::config::{execute, prepare, read_case, ConfigError, RunError, StudyConfig};
use dersite::net::{load_case_json, scale_loads, CaseError, NetworkCase};
use dersite::opf::{kkt_residual, solve_opf, validity_range, OpfError, OpfOptions, OpfSolution};
use dersite::placement::{DerMode, DerUnit};

/// Result codes. `DERSITE_STATUS_OK` is zero; everything else is an error.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DersiteStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    CaseError = 4,
    ConfigError = 5,
    InvalidArgument = 6,
    Infeasible = 7,
    IterationLimit = 8,
    StudyFailed = 9,
    BufferTooSmall = 10,
    Panic = 99,
}

/// DER dispatch mode for range probes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DersiteDerMode {
    NonDispatchablePq = 0,
    DispatchableQ = 1,
    DispatchablePq = 2,
}

impl From<DersiteDerMode> for DerMode {
    fn from(m: DersiteDerMode) -> Self {
        match m {
            DersiteDerMode::NonDispatchablePq => DerMode::NonDispatchablePq,
            DersiteDerMode::DispatchableQ => DerMode::DispatchableQ,
            DersiteDerMode::DispatchablePq => DerMode::DispatchablePq,
        }
    }
}

/// A parsed network case.
pub struct DersiteCase {
    case: NetworkCase,
}

/// A converged OPF solution together with the case it was solved on.
pub struct DersiteSolution {
    case: NetworkCase,
    solution: OpfSolution,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Fail(DersiteStatus, String);

impl From<CaseError> for Fail {
    fn from(e: CaseError) -> Self {
        Fail(DersiteStatus::CaseError, e.to_string())
    }
}

impl From<OpfError> for Fail {
    fn from(e: OpfError) -> Self {
        let code = match &e {
            OpfError::Infeasible { .. } => DersiteStatus::Infeasible,
            OpfError::IterationLimit { .. } => DersiteStatus::IterationLimit,
            OpfError::Case(_) => DersiteStatus::CaseError,
            _ => DersiteStatus::InvalidArgument,
        };
        Fail(code, e.to_string())
    }
}

impl From<ConfigError> for Fail {
    fn from(e: ConfigError) -> Self {
        let code = match &e {
            ConfigError::Io { .. } => DersiteStatus::Io,
            ConfigError::Case { .. } => DersiteStatus::CaseError,
            _ => DersiteStatus::ConfigError,
        };
        Fail(code, e.to_string())
    }
}

impl From<RunError> for Fail {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(c) => c.into(),
            other => Fail(DersiteStatus::StudyFailed, other.to_string()),
        }
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(body: impl FnOnce() -> Result<(), Fail>) -> DersiteStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DersiteStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            DersiteStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(DersiteStatus::NullArgument, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(DersiteStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn copy_out(values: &[f64], out: *mut f64, len: usize, needed: *mut usize) -> Result<(), Fail> {
    if !needed.is_null() {
        *needed = values.len();
    }
    if out.is_null() {
        return Err(null("out"));
    }
    if len < values.len() {
        return Err(Fail(
            DersiteStatus::BufferTooSmall,
            format!("buffer holds {len}, need {}", values.len()),
        ));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn dersite_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn dersite_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Reads a MATPOWER `.m` or canonical `.json` case from `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dersite_case_load(path: *const c_char, out: *mut *mut DersiteCase) -> DersiteStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let case = read_case(Path::new(path))?;
        *out = Box::into_raw(Box::new(DersiteCase { case }));
        Ok(())
    })
}

/// Parses a case from canonical JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dersite_case_from_json(
    json: *const c_char,
    out: *mut *mut DersiteCase,
) -> DersiteStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        let out = out_arg(out, "out")?;
        let case = load_case_json(text)?;
        *out = Box::into_raw(Box::new(DersiteCase { case }));
        Ok(())
    })
}

/// # Safety
/// `case` must come from this library and not be used afterwards. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn dersite_case_free(case: *mut DersiteCase) {
    if !case.is_null() {
        drop(Box::from_raw(case));
    }
}

/// Number of buses in the case, 0 for NULL.
///
/// # Safety
/// `case` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dersite_case_n_buses(case: *const DersiteCase) -> usize {
    case.as_ref().map_or(0, |c| c.case.n_buses())
}

/// Copies the bus ids in case order. `needed` (optional) receives the count.
///
/// # Safety
/// `out` must hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn dersite_case_bus_ids(
    case: *const DersiteCase,
    out: *mut u32,
    len: usize,
    needed: *mut usize,
) -> DersiteStatus {
    guard(|| {
        let c = ref_arg(case, "case")?;
        let ids: Vec<u32> = c.case.buses.iter().map(|b| b.id).collect();
        if !needed.is_null() {
            *needed = ids.len();
        }
        if out.is_null() {
            return Err(null("out"));
        }
        if len < ids.len() {
            return Err(Fail(
                DersiteStatus::BufferTooSmall,
                format!("buffer holds {len}, need {}", ids.len()),
            ));
        }
        ptr::copy_nonoverlapping(ids.as_ptr(), out, ids.len());
        Ok(())
    })
}

/// New case with every bus load multiplied by `factor`.
///
/// # Safety
/// `case` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dersite_case_scale_loads(
    case: *const DersiteCase,
    factor: f64,
    out: *mut *mut DersiteCase,
) -> DersiteStatus {
    guard(|| {
        let c = ref_arg(case, "case")?;
        let out = out_arg(out, "out")?;
        let scaled = scale_loads(&c.case, factor)?;
        *out = Box::into_raw(Box::new(DersiteCase { case: scaled }));
        Ok(())
    })
}

/// Solves the AC-OPF with default options. Only converged solutions produce
/// a handle; infeasible and iteration-limit outcomes return their codes.
///
/// # Safety
/// `case` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dersite_solve_opf(
    case: *const DersiteCase,
    out: *mut *mut DersiteSolution,
) -> DersiteStatus {
    guard(|| {
        let c = ref_arg(case, "case")?;
        let out = out_arg(out, "out")?;
        let solution = solve_opf(&c.case, &OpfOptions::default())?;
        solution.require_converged()?;
        *out = Box::into_raw(Box::new(DersiteSolution {
            case: c.case.clone(),
            solution,
        }));
        Ok(())
    })
}

/// # Safety
/// `solution` must come from this library and not be used afterwards. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn dersite_solution_free(solution: *mut DersiteSolution) {
    if !solution.is_null() {
        drop(Box::from_raw(solution));
    }
}

/// Optimal cost, $/h.
///
/// # Safety
/// `solution` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dersite_solution_objective(
    solution: *const DersiteSolution,
    out: *mut f64,
) -> DersiteStatus {
    guard(|| {
        let s = ref_arg(solution, "solution")?;
        *out_arg(out, "out")? = s.solution.objective;
        Ok(())
    })
}

/// Active-power nodal prices, $/MWh, in case bus order.
///
/// # Safety
/// `out` must hold `len` doubles; `needed` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn dersite_solution_lambda_p(
    solution: *const DersiteSolution,
    out: *mut f64,
    len: usize,
    needed: *mut usize,
) -> DersiteStatus {
    guard(|| {
        let s = ref_arg(solution, "solution")?;
        copy_out(&s.solution.lambda_p, out, len, needed)
    })
}

/// Generator active outputs, MW, in case generator order.
///
/// # Safety
/// `out` must hold `len` doubles; `needed` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn dersite_solution_p_gen(
    solution: *const DersiteSolution,
    out: *mut f64,
    len: usize,
    needed: *mut usize,
) -> DersiteStatus {
    guard(|| {
        let s = ref_arg(solution, "solution")?;
        copy_out(&s.solution.p_gen, out, len, needed)
    })
}

/// Number of inequality constraints in the binding set.
///
/// # Safety
/// `solution` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dersite_solution_n_binding(solution: *const DersiteSolution) -> usize {
    solution.as_ref().map_or(0, |s| s.solution.binding_set.len())
}

/// Stationarity, feasibility and complementarity residuals (per unit).
///
/// # Safety
/// `solution` must be a live handle; the three outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn dersite_solution_kkt(
    solution: *const DersiteSolution,
    stationarity: *mut f64,
    feasibility: *mut f64,
    complementarity: *mut f64,
) -> DersiteStatus {
    guard(|| {
        let s = ref_arg(solution, "solution")?;
        let (a, b, c) = (
            out_arg(stationarity, "stationarity")?,
            out_arg(feasibility, "feasibility")?,
            out_arg(complementarity, "complementarity")?,
        );
        let r = kkt_residual(&s.case, &s.solution)?;
        (*a, *b, *c) = (r.stationarity, r.feasibility, r.complementarity);
        Ok(())
    })
}

/// Largest injection (MW, up to `p_size`) of a DER probe at `bus` that keeps
/// the binding set unchanged.
///
/// # Safety
/// `case` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dersite_validity_range(
    case: *const DersiteCase,
    bus: u32,
    p_size: f64,
    q_size: f64,
    mode: DersiteDerMode,
    out: *mut f64,
) -> DersiteStatus {
    guard(|| {
        let c = ref_arg(case, "case")?;
        let out = out_arg(out, "out")?;
        let probe = DerUnit::new(p_size, q_size, mode.into());
        *out = validity_range(&c.case, bus, &probe, &OpfOptions::default())?.delta_p_max;
        Ok(())
    })
}

/// Runs the studies of a TOML config (no files are written) and returns the
/// plans and comparison as a JSON string, freed with [`dersite_string_free`].
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dersite_run_study(
    config_path: *const c_char,
    out: *mut *mut c_char,
) -> DersiteStatus {
    guard(|| {
        let path = str_arg(config_path, "config_path")?;
        let out = out_arg(out, "out")?;
        let cfg = StudyConfig::load(Path::new(path))?;
        let prepared = prepare(&cfg)?;
        let outcome = execute(&cfg, &prepared)?;
        let json = serde_json::json!({
            "plans": outcome.plans(),
            "comparison": outcome.comparison,
        });
        let text =
            CString::new(json.to_string()).map_err(|e| Fail(DersiteStatus::StudyFailed, e.to_string()))?;
        *out = text.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be used afterwards. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn dersite_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

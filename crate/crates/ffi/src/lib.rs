//! C ABI over `smpc`: opaque scenario and controller handles, status codes
//! and a thread-local last-error message.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use smpc::cli::design_check;
use smpc::config::Scenario;
use smpc::linalg::Vector;
use smpc::nlp::SolveStatus;
use smpc::ocp::Trajectory;
use smpc::simulator::{aggregate_stats, simulate};
use smpc::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmpcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Dimension = 4,
    Usage = 5,
    Infeasible = 6,
    /// The OCP solve ended without a solution; outputs hold the best iterate.
    NotSolved = 7,
    Io = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Parsed configuration with its model, design and OCP.
pub struct SmpcScenario {
    inner: Arc<Scenario>,
}

/// Receding-horizon controller that warm starts from its previous solution.
pub struct SmpcController {
    scenario: Arc<Scenario>,
    prev: Option<Trajectory>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> SmpcStatus {
    match e {
        Error::Config(_) | Error::Parse(_) | Error::Domain(_) => SmpcStatus::Config,
        Error::Dimension { .. } => SmpcStatus::Dimension,
        Error::Usage(_) => SmpcStatus::Usage,
        Error::Infeasible(_) => SmpcStatus::Infeasible,
        Error::Io(_) => SmpcStatus::Io,
    }
}

/// Runs `f`, recording errors and converting panics.
fn guard(f: impl FnOnce() -> Result<SmpcStatus, (SmpcStatus, String)>) -> SmpcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(s)) => s,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            SmpcStatus::Panic
        }
    }
}

fn lift(e: Error) -> (SmpcStatus, String) {
    (status_of(&e), e.to_string())
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, (SmpcStatus, String)> {
    if p.is_null() {
        return Err((SmpcStatus::NullPointer, "null string argument".into()));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| (SmpcStatus::InvalidUtf8, e.to_string()))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, expected: usize, what: &str) -> Result<&'a [f64], (SmpcStatus, String)> {
    if p.is_null() {
        return Err((SmpcStatus::NullPointer, format!("null {what}")));
    }
    if len != expected {
        return Err((SmpcStatus::Dimension, format!("{what} has length {len}, expected {expected}")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, expected: usize, what: &str) -> Result<&'a mut [f64], (SmpcStatus, String)> {
    if p.is_null() {
        return Err((SmpcStatus::NullPointer, format!("null {what}")));
    }
    if len < expected {
        return Err((SmpcStatus::BufferTooSmall, format!("{what} holds {len}, needs {expected}")));
    }
    Ok(std::slice::from_raw_parts_mut(p, expected))
}

unsafe fn scenario_ref<'a>(s: *const SmpcScenario) -> Result<&'a Arc<Scenario>, (SmpcStatus, String)> {
    s.as_ref()
        .map(|s| &s.inner)
        .ok_or((SmpcStatus::NullPointer, "null scenario".into()))
}

fn publish(out: *mut *mut SmpcScenario, sc: Scenario) {
    let handle = Box::new(SmpcScenario { inner: Arc::new(sc) });
    // SAFETY: caller checked `out` for null.
    unsafe { *out = Box::into_raw(handle) };
}

/// Builds a scenario from TOML text. On success `*out` owns a handle to be
/// released with `smpc_scenario_free`.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn smpc_scenario_from_toml(text: *const c_char, out: *mut *mut SmpcScenario) -> SmpcStatus {
    guard(|| {
        if out.is_null() {
            return Err((SmpcStatus::NullPointer, "null output handle".into()));
        }
        let text = str_arg(text)?;
        publish(out, Scenario::from_toml_str(text).map_err(lift)?);
        Ok(SmpcStatus::Ok)
    })
}

/// Builds a scenario from a TOML file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn smpc_scenario_load(path: *const c_char, out: *mut *mut SmpcScenario) -> SmpcStatus {
    guard(|| {
        if out.is_null() {
            return Err((SmpcStatus::NullPointer, "null output handle".into()));
        }
        let path = str_arg(path)?;
        publish(out, Scenario::load(Path::new(path)).map_err(lift)?);
        Ok(SmpcStatus::Ok)
    })
}

/// Releases a scenario; null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn smpc_scenario_free(s: *mut SmpcScenario) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// State dimension, 0 for a null handle.
///
/// # Safety
/// `s` must be null or a live scenario.
#[no_mangle]
pub unsafe extern "C" fn smpc_state_dim(s: *const SmpcScenario) -> usize {
    s.as_ref().map_or(0, |s| s.inner.setup.model.n())
}

/// Input dimension, 0 for a null handle.
///
/// # Safety
/// `s` must be null or a live scenario.
#[no_mangle]
pub unsafe extern "C" fn smpc_input_dim(s: *const SmpcScenario) -> usize {
    s.as_ref().map_or(0, |s| s.inner.setup.model.m())
}

/// Prediction horizon, 0 for a null handle.
///
/// # Safety
/// `s` must be null or a live scenario.
#[no_mangle]
pub unsafe extern "C" fn smpc_horizon(s: *const SmpcScenario) -> usize {
    s.as_ref().map_or(0, |s| s.inner.setup.horizon())
}

/// Runs the sampled design check; `*passed` is 1 when every check passed.
///
/// # Safety
/// `s` must be a live scenario and `passed` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn smpc_design_check(s: *const SmpcScenario, seed: u64, passed: *mut i32) -> SmpcStatus {
    guard(|| {
        let sc = scenario_ref(s)?;
        if passed.is_null() {
            return Err((SmpcStatus::NullPointer, "null result pointer".into()));
        }
        let report = design_check(sc, seed).map_err(lift)?;
        *passed = i32::from(report.passed);
        Ok(SmpcStatus::Ok)
    })
}

/// Cold-started OCP solve from `x0`; writes `u*_{0}` to `u_out` and `V_N` to
/// `value` (nullable). Returns `NotSolved` when the solver stopped short.
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn smpc_solve(
    s: *const SmpcScenario,
    x0: *const f64,
    n: usize,
    u_out: *mut f64,
    m: usize,
    value: *mut f64,
) -> SmpcStatus {
    guard(|| {
        let sc = scenario_ref(s)?;
        let x = slice_arg(x0, n, sc.setup.model.n(), "state")?;
        let u = out_slice(u_out, m, sc.setup.model.m(), "input buffer")?;
        let sol = sc
            .setup
            .solve(&Vector::from_column_slice(x), None, &sc.config.solver)
            .map_err(lift)?;
        u.copy_from_slice(sol.traj.u[0].as_slice());
        if !value.is_null() {
            *value = sol.value;
        }
        if sol.status == SolveStatus::Solved {
            Ok(SmpcStatus::Ok)
        } else {
            Err((SmpcStatus::NotSolved, format!("solver status {}", sol.status.as_str())))
        }
    })
}

/// Creates a controller bound to `s`; the scenario may be freed afterwards.
///
/// # Safety
/// `s` must be a live scenario and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn smpc_controller_new(s: *const SmpcScenario, out: *mut *mut SmpcController) -> SmpcStatus {
    guard(|| {
        let sc = scenario_ref(s)?;
        if out.is_null() {
            return Err((SmpcStatus::NullPointer, "null output handle".into()));
        }
        *out = Box::into_raw(Box::new(SmpcController {
            scenario: Arc::clone(sc),
            prev: None,
        }));
        Ok(SmpcStatus::Ok)
    })
}

/// Releases a controller; null is ignored.
///
/// # Safety
/// `c` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn smpc_controller_free(c: *mut SmpcController) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// One receding-horizon step at the measured state: solves warm started
/// from the shifted previous solution and writes the input to apply. After
/// a failed solve the shifted candidate's input is written, `*fallback` is
/// set to 1 and `Ok` is returned; a failure without previous solution
/// returns `Infeasible`.
///
/// # Safety
/// Pointers must be valid for the given lengths; `fallback` may be null.
#[no_mangle]
pub unsafe extern "C" fn smpc_controller_step(
    c: *mut SmpcController,
    x: *const f64,
    n: usize,
    u_out: *mut f64,
    m: usize,
    fallback: *mut i32,
) -> SmpcStatus {
    guard(|| {
        let ctrl = c.as_mut().ok_or((SmpcStatus::NullPointer, "null controller".to_string()))?;
        let setup = &ctrl.scenario.setup;
        let x = Vector::from_column_slice(slice_arg(x, n, setup.model.n(), "state")?);
        let u = out_slice(u_out, m, setup.model.m(), "input buffer")?;
        let warm = ctrl.prev.as_ref().map(|p| setup.candidate(p, &x));
        let sol = setup.solve(&x, warm.as_ref(), &ctrl.scenario.config.solver).map_err(lift)?;
        let (traj, fell_back) = if sol.status == SolveStatus::Solved {
            (sol.traj, false)
        } else if let Some(w) = warm {
            (w, true)
        } else {
            return Err((
                SmpcStatus::Infeasible,
                format!("first solve ended with status {}", sol.status.as_str()),
            ));
        };
        u.copy_from_slice(setup.clip_input(&traj.u[0]).as_slice());
        if !fallback.is_null() {
            *fallback = i32::from(fell_back);
        }
        ctrl.prev = Some(traj);
        Ok(SmpcStatus::Ok)
    })
}

/// Runs the configured closed-loop simulation with `seed`; writes the pooled
/// joint chance-constraint satisfaction rate and the number of steps.
///
/// # Safety
/// `s` must be a live scenario; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn smpc_simulate(s: *const SmpcScenario, seed: u64, rate: *mut f64, steps: *mut usize) -> SmpcStatus {
    guard(|| {
        let sc = scenario_ref(s)?;
        if rate.is_null() || steps.is_null() {
            return Err((SmpcStatus::NullPointer, "null result pointer".into()));
        }
        let runs = simulate(sc, seed).map_err(lift)?;
        let stats = aggregate_stats(sc, &runs).map_err(lift)?;
        *rate = stats.joint.rate;
        *steps = stats.steps;
        Ok(SmpcStatus::Ok)
    })
}

/// Copies the calling thread's last error message, NUL terminated, into
/// `buf`. `*needed` (nullable) receives the required size including the NUL.
///
/// # Safety
/// `buf` must be valid for `len` bytes or null with `len == 0`.
#[no_mangle]
pub unsafe extern "C" fn smpc_last_error(buf: *mut c_char, len: usize, needed: *mut usize) -> SmpcStatus {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !needed.is_null() {
            *needed = bytes.len() + 1;
        }
        if len < bytes.len() + 1 || buf.is_null() {
            return SmpcStatus::BufferTooSmall;
        }
        std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), bytes.len());
        *buf.add(bytes.len()) = 0;
        SmpcStatus::Ok
    })
}

//! C interface to `satmpc`.
//!
//! Objects are opaque handles created by `*_new` functions and released with
//! the matching `*_free`. Functions return a [`SatmpcStatus`]; on failure the
//! message is available from [`satmpc_last_error`] on the same thread.
//! Strings handed out by the library are freed with [`satmpc_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::DVector;
use satmpc::cli::{certificate_json, moments_json, simulate_problem};
use satmpc::config::{Problem, RunConfig};
use satmpc::control::ControlMode;
use satmpc::moments::MomentMatrices;
use satmpc::qp::{evaluate_expected_cost, PolicyParameters};
use satmpc::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SatmpcStatus {
    Ok = 0,
    /// Null pointer or wrong buffer length.
    InvalidArgument = 1,
    /// Configuration, dimension or input validation error.
    Config = 2,
    Numerical = 3,
    NotCertifiable = 4,
    Io = 5,
    Panic = 6,
}

/// `mode` argument: use the configured `sim.mode`.
pub const SATMPC_MODE_CONFIG: i32 = -1;
pub const SATMPC_MODE_MPC: i32 = 0;
pub const SATMPC_MODE_RHC: i32 = 1;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SatmpcStatus {
    match e.exit_code() {
        2 => SatmpcStatus::Config,
        3 => SatmpcStatus::Numerical,
        4 => SatmpcStatus::NotCertifiable,
        _ => SatmpcStatus::Io,
    }
}

fn guard<F: FnOnce() -> Result<(), (SatmpcStatus, String)>>(f: F) -> SatmpcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SatmpcStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SatmpcStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (SatmpcStatus, String) {
    (status_of(&e), e.to_string())
}

fn invalid(msg: &str) -> (SatmpcStatus, String) {
    (SatmpcStatus::InvalidArgument, msg.to_string())
}

/// A validated run configuration with its moment matrices.
pub struct SatmpcProblem {
    problem: Problem,
    lambda: MomentMatrices,
}

pub struct SatmpcPolicy {
    policy: PolicyParameters,
    expected_cost: f64,
}

/// Message of the last failure on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn satmpc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

fn build_problem(config: RunConfig) -> Result<Box<SatmpcProblem>, (SatmpcStatus, String)> {
    let problem = Problem::new(config).map_err(lib_err)?;
    let lambda = problem.moments().map_err(lib_err)?;
    Ok(Box::new(SatmpcProblem { problem, lambda }))
}

/// Parses a JSON configuration and computes its moment matrices.
///
/// # Safety
/// `json` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn satmpc_problem_new(json: *const c_char, out: *mut *mut SatmpcProblem) -> SatmpcStatus {
    guard(|| {
        if json.is_null() || out.is_null() {
            return Err(invalid("null argument"));
        }
        let text = CStr::from_ptr(json).to_str().map_err(|_| invalid("config is not valid UTF-8"))?;
        let config = RunConfig::from_json(text).map_err(lib_err)?;
        *out = Box::into_raw(build_problem(config)?);
        Ok(())
    })
}

/// The built-in numerical example.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn satmpc_problem_paper_preset(out: *mut *mut SatmpcProblem) -> SatmpcStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("null argument"));
        }
        *out = Box::into_raw(build_problem(RunConfig::paper_preset())?);
        Ok(())
    })
}

/// # Safety
/// `problem` must come from `satmpc_problem_new` or be null.
#[no_mangle]
pub unsafe extern "C" fn satmpc_problem_free(problem: *mut SatmpcProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// State dimension `n`, or 0 for a null handle.
///
/// # Safety
/// `problem` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn satmpc_problem_state_dim(problem: *const SatmpcProblem) -> usize {
    problem.as_ref().map_or(0, |p| p.problem.model.n())
}

/// # Safety
/// `problem` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn satmpc_problem_input_dim(problem: *const SatmpcProblem) -> usize {
    problem.as_ref().map_or(0, |p| p.problem.model.m())
}

/// # Safety
/// `problem` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn satmpc_problem_horizon(problem: *const SatmpcProblem) -> usize {
    problem.as_ref().map_or(0, |p| p.problem.horizon())
}

unsafe fn emit_json(value: &serde_json::Value, out: *mut *mut c_char) {
    let text = serde_json::to_string(value).expect("json values serialize");
    *out = CString::new(text).expect("json has no nul bytes").into_raw();
}

/// Writes the moment matrices as JSON into `*out`.
///
/// # Safety
/// `problem` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn satmpc_moments_json(problem: *const SatmpcProblem, out: *mut *mut c_char) -> SatmpcStatus {
    guard(|| {
        let p = problem.as_ref().ok_or_else(|| invalid("null problem"))?;
        if out.is_null() {
            return Err(invalid("null output"));
        }
        emit_json(&moments_json(&p.lambda), out);
        Ok(())
    })
}

/// Solves the policy program at `x0` (length `n`).
///
/// # Safety
/// `x0` must point to `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn satmpc_solve(
    problem: *const SatmpcProblem,
    x0: *const f64,
    len: usize,
    out: *mut *mut SatmpcPolicy,
) -> SatmpcStatus {
    guard(|| {
        let p = problem.as_ref().ok_or_else(|| invalid("null problem"))?;
        if x0.is_null() || out.is_null() {
            return Err(invalid("null argument"));
        }
        if len != p.problem.model.n() {
            return Err(invalid("x0 length does not match the state dimension"));
        }
        let x0 = DVector::from_column_slice(std::slice::from_raw_parts(x0, len));
        let mut ctrl = p.problem.controller(&p.lambda).map_err(lib_err)?;
        let policy = ctrl.solve_at(&x0).map_err(lib_err)?;
        let expected_cost = evaluate_expected_cost(&policy, ctrl.problem());
        *out = Box::into_raw(Box::new(SatmpcPolicy { policy, expected_cost }));
        Ok(())
    })
}

/// # Safety
/// `policy` must come from `satmpc_solve` or be null.
#[no_mangle]
pub unsafe extern "C" fn satmpc_policy_free(policy: *mut SatmpcPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Rows of `Ḡ` (and length of `d̄`), `N·m`.
///
/// # Safety
/// `policy` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn satmpc_policy_rows(policy: *const SatmpcPolicy) -> usize {
    policy.as_ref().map_or(0, |p| p.policy.g_bar.nrows())
}

/// Columns of `Ḡ`, `N·n`.
///
/// # Safety
/// `policy` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn satmpc_policy_cols(policy: *const SatmpcPolicy) -> usize {
    policy.as_ref().map_or(0, |p| p.policy.g_bar.ncols())
}

/// Copies `d̄` into `buf`, which must hold exactly `satmpc_policy_rows` doubles.
///
/// # Safety
/// `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn satmpc_policy_d_bar(policy: *const SatmpcPolicy, buf: *mut f64, len: usize) -> SatmpcStatus {
    guard(|| {
        let p = policy.as_ref().ok_or_else(|| invalid("null policy"))?;
        if buf.is_null() || len != p.policy.d_bar.len() {
            return Err(invalid("buffer must hold N*m doubles"));
        }
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(p.policy.d_bar.as_slice());
        Ok(())
    })
}

/// Copies `Ḡ` row-major into `buf` of exactly `rows * cols` doubles.
///
/// # Safety
/// `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn satmpc_policy_g_bar(policy: *const SatmpcPolicy, buf: *mut f64, len: usize) -> SatmpcStatus {
    guard(|| {
        let p = policy.as_ref().ok_or_else(|| invalid("null policy"))?;
        let g = &p.policy.g_bar;
        if buf.is_null() || len != g.len() {
            return Err(invalid("buffer must hold rows*cols doubles"));
        }
        let dst = std::slice::from_raw_parts_mut(buf, len);
        for (k, v) in g.transpose().iter().enumerate() {
            dst[k] = *v;
        }
        Ok(())
    })
}

/// Objective without the constant term; NaN for a null handle.
///
/// # Safety
/// `policy` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn satmpc_policy_objective(policy: *const SatmpcPolicy) -> f64 {
    policy.as_ref().map_or(f64::NAN, |p| p.policy.objective)
}

/// Full expected cost including the constant term.
///
/// # Safety
/// `policy` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn satmpc_policy_expected_cost(policy: *const SatmpcPolicy) -> f64 {
    policy.as_ref().map_or(f64::NAN, |p| p.expected_cost)
}

/// # Safety
/// `policy` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn satmpc_policy_feasibility_margin(policy: *const SatmpcPolicy) -> f64 {
    policy.as_ref().map_or(f64::NAN, |p| p.policy.feasibility_margin)
}

/// # Safety
/// `policy` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn satmpc_policy_kkt_residual(policy: *const SatmpcPolicy) -> f64 {
    policy.as_ref().map_or(f64::NAN, |p| p.policy.kkt_residual)
}

fn resolve_mode(p: &SatmpcProblem, mode: i32) -> Result<ControlMode, (SatmpcStatus, String)> {
    match mode {
        SATMPC_MODE_CONFIG => Ok(p.problem.config.sim.mode),
        SATMPC_MODE_MPC => Ok(ControlMode::Mpc),
        SATMPC_MODE_RHC => Ok(ControlMode::Rhc),
        _ => Err(invalid("mode must be -1, 0 or 1")),
    }
}

/// Runs the configured closed-loop simulation and writes the summary JSON.
///
/// # Safety
/// `problem` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn satmpc_simulate_json(problem: *const SatmpcProblem, mode: i32, out: *mut *mut c_char) -> SatmpcStatus {
    guard(|| {
        let p = problem.as_ref().ok_or_else(|| invalid("null problem"))?;
        if out.is_null() {
            return Err(invalid("null output"));
        }
        let mode = resolve_mode(p, mode)?;
        let mut problem = p.problem.clone();
        problem.config.sim.mode = mode;
        let result = simulate_problem(&problem, &p.lambda).map_err(lib_err)?;
        emit_json(&result.json, out);
        Ok(())
    })
}

/// Drift certificate as JSON. Returns `NotCertifiable` for a non-Schur `A`.
///
/// # Safety
/// `problem` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn satmpc_certify_json(problem: *const SatmpcProblem, mode: i32, out: *mut *mut c_char) -> SatmpcStatus {
    guard(|| {
        let p = problem.as_ref().ok_or_else(|| invalid("null problem"))?;
        if out.is_null() {
            return Err(invalid("null output"));
        }
        let mode = resolve_mode(p, mode)?;
        let v = certificate_json(&p.problem, mode, &p.lambda).map_err(lib_err)?;
        emit_json(&v, out);
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn satmpc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

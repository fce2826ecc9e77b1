//! C ABI for the adjoint-ts library: opaque handles, status codes, and flat
//! buffers, so other languages can drive cost, gradient, Hessian-vector
//! product, and checkpoint-schedule computations.
//!
//! Every entry point catches panics and reports them as a status code; the
//! last error message is kept in thread-local storage and can be fetched
//! with [`adjts_last_error_message`].

use adjoint_ts::checkpoint::{Action, CheckpointMode, CheckpointSchedule};
use adjoint_ts::driver::{cost, gradient, hvp, Storage};
use adjoint_ts::forward::Method;
use adjoint_ts::problem::Vector;
use adjoint_ts::problems::{by_name, InstanceOpts, ProblemInstance};
use adjoint_ts::second_order::HvpTarget;
use libc::{c_char, c_double, c_int, size_t};
use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

/// Status code returned by every API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjTsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    UnknownProblem = 3,
    InvalidArgument = 4,
    SolveFailed = 5,
    BufferTooSmall = 6,
    InternalPanic = 7,
}

/// Time integration method selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjTsMethod {
    /// Theta method; the `theta` argument selects the blend
    /// (1 = backward Euler, 0.5 = Crank-Nicolson, 0 = explicit).
    Theta = 0,
    /// Classic fourth-order Runge-Kutta.
    Rk4 = 1,
}

/// Checkpoint unit type for bounded-memory reverse sweeps.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjTsCheckpointMode {
    SolutionOnly = 0,
    SolutionWithStages = 1,
}

/// Action kinds in a checkpointing schedule.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjTsActionKind {
    Store = 0,
    Advance = 1,
    Restore = 2,
    AdjoinStep = 3,
    Discard = 4,
}

/// Opaque problem handle: a registered problem plus its stepping setup.
pub struct AdjTsProblem {
    inst: ProblemInstance,
}

/// Opaque checkpoint schedule handle.
pub struct AdjTsSchedule {
    schedule: CheckpointSchedule,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|c| *c != '\0').collect();
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn guard<F: FnOnce() -> AdjTsStatus>(f: F) -> AdjTsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(&msg);
            AdjTsStatus::InternalPanic
        }
    }
}

fn to_method(method: AdjTsMethod, theta: f64) -> Result<Method, AdjTsStatus> {
    match method {
        AdjTsMethod::Rk4 => Ok(Method::Rk4),
        AdjTsMethod::Theta => {
            if (0.0..=1.0).contains(&theta) {
                Ok(Method::Theta(theta))
            } else {
                set_error("theta outside [0, 1]");
                Err(AdjTsStatus::InvalidArgument)
            }
        }
    }
}

fn to_mode(mode: AdjTsCheckpointMode) -> CheckpointMode {
    match mode {
        AdjTsCheckpointMode::SolutionOnly => CheckpointMode::SolutionOnly,
        AdjTsCheckpointMode::SolutionWithStages => CheckpointMode::SolutionWithStages,
    }
}

unsafe fn slice_from<'a>(ptr: *const c_double, len: size_t) -> Option<&'a [f64]> {
    if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(ptr, len))
    }
}

/// Create a problem handle by registered name (`aircraft`, `grayscott`,
/// `linear-test`). Pass 0 for `grid` or `steps` to use the problem default.
///
/// # Safety
/// `name` must be a valid NUL-terminated string; `out` must be a valid
/// pointer. The returned handle must be released with
/// [`adjts_problem_free`].
#[no_mangle]
pub unsafe extern "C" fn adjts_problem_create(
    name: *const c_char,
    grid: size_t,
    method: AdjTsMethod,
    theta: c_double,
    steps: size_t,
    out: *mut *mut AdjTsProblem,
) -> AdjTsStatus {
    guard(|| {
        if name.is_null() || out.is_null() {
            set_error("null pointer argument");
            return AdjTsStatus::NullPointer;
        }
        let name = match CStr::from_ptr(name).to_str() {
            Ok(s) => s,
            Err(_) => {
                set_error("problem name is not valid UTF-8");
                return AdjTsStatus::InvalidUtf8;
            }
        };
        let m = match to_method(method, theta) {
            Ok(m) => m,
            Err(status) => return status,
        };
        let opts = InstanceOpts {
            method: Some(m),
            steps: (steps > 0).then_some(steps),
            grid: (grid > 0).then_some(grid),
            control_intervals: None,
        };
        match by_name(name, &opts) {
            Ok(inst) => {
                *out = Box::into_raw(Box::new(AdjTsProblem { inst }));
                AdjTsStatus::Ok
            }
            Err(e) => {
                set_error(&e);
                AdjTsStatus::UnknownProblem
            }
        }
    })
}

/// Release a problem handle. Passing NULL is a no-op.
///
/// # Safety
/// `p` must be a handle from [`adjts_problem_create`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn adjts_problem_free(p: *mut AdjTsProblem) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Number of optimization parameters of the problem.
///
/// # Safety
/// `p` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn adjts_problem_num_params(
    p: *const AdjTsProblem,
    out: *mut size_t,
) -> AdjTsStatus {
    guard(|| {
        if p.is_null() || out.is_null() {
            set_error("null pointer argument");
            return AdjTsStatus::NullPointer;
        }
        *out = (*p).inst.p0.len();
        AdjTsStatus::Ok
    })
}

/// State dimension of the problem.
///
/// # Safety
/// `p` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn adjts_problem_num_states(
    p: *const AdjTsProblem,
    out: *mut size_t,
) -> AdjTsStatus {
    guard(|| {
        if p.is_null() || out.is_null() {
            set_error("null pointer argument");
            return AdjTsStatus::NullPointer;
        }
        *out = (*p).inst.problem.dim_state;
        AdjTsStatus::Ok
    })
}

/// Copy the problem's default starting parameters into `buf`.
///
/// # Safety
/// `buf` must point to at least `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn adjts_problem_initial_params(
    p: *const AdjTsProblem,
    buf: *mut c_double,
    len: size_t,
) -> AdjTsStatus {
    guard(|| {
        if p.is_null() || buf.is_null() {
            set_error("null pointer argument");
            return AdjTsStatus::NullPointer;
        }
        let p0 = &(*p).inst.p0;
        if len < p0.len() {
            set_error("parameter buffer too small");
            return AdjTsStatus::BufferTooSmall;
        }
        std::slice::from_raw_parts_mut(buf, p0.len()).copy_from_slice(p0.as_slice());
        AdjTsStatus::Ok
    })
}

/// Evaluate the cost at the given parameters.
///
/// # Safety
/// `params` must point to `len` doubles; `out_cost` must be valid.
#[no_mangle]
pub unsafe extern "C" fn adjts_cost(
    p: *const AdjTsProblem,
    params: *const c_double,
    len: size_t,
    out_cost: *mut c_double,
) -> AdjTsStatus {
    guard(|| {
        if p.is_null() || out_cost.is_null() {
            set_error("null pointer argument");
            return AdjTsStatus::NullPointer;
        }
        let inst = &(*p).inst;
        let Some(params) = slice_from(params, len) else {
            set_error("null parameter buffer");
            return AdjTsStatus::NullPointer;
        };
        if params.len() != inst.p0.len() {
            set_error("parameter length mismatch");
            return AdjTsStatus::InvalidArgument;
        }
        match cost(&inst.eval_context(), &Vector::from_column_slice(params)) {
            Ok(c) => {
                *out_cost = c;
                AdjTsStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                AdjTsStatus::SolveFailed
            }
        }
    })
}

/// Evaluate cost and adjoint gradient. `capacity = 0` keeps the whole
/// trajectory in memory; a positive capacity runs the reverse sweep through
/// the checkpointing provider.
///
/// # Safety
/// `params` and `out_grad` must point to `len` doubles; `out_cost` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn adjts_gradient(
    p: *const AdjTsProblem,
    params: *const c_double,
    len: size_t,
    capacity: size_t,
    mode: AdjTsCheckpointMode,
    out_cost: *mut c_double,
    out_grad: *mut c_double,
) -> AdjTsStatus {
    guard(|| {
        if p.is_null() || out_cost.is_null() || out_grad.is_null() {
            set_error("null pointer argument");
            return AdjTsStatus::NullPointer;
        }
        let inst = &(*p).inst;
        let Some(params) = slice_from(params, len) else {
            set_error("null parameter buffer");
            return AdjTsStatus::NullPointer;
        };
        if params.len() != inst.p0.len() {
            set_error("parameter length mismatch");
            return AdjTsStatus::InvalidArgument;
        }
        let storage = if capacity == 0 {
            Storage::Full
        } else {
            Storage::Checkpointed {
                capacity,
                mode: to_mode(mode),
            }
        };
        match gradient(
            &inst.eval_context(),
            &Vector::from_column_slice(params),
            &storage,
        ) {
            Ok(res) => {
                *out_cost = res.cost;
                std::slice::from_raw_parts_mut(out_grad, len)
                    .copy_from_slice(res.gradient.as_slice());
                AdjTsStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                AdjTsStatus::SolveFailed
            }
        }
    })
}

/// Hessian-vector product of the cost with respect to the parameters.
///
/// # Safety
/// `params`, `sigma`, and `out_hvp` must point to `len` doubles each.
#[no_mangle]
pub unsafe extern "C" fn adjts_hvp(
    p: *const AdjTsProblem,
    params: *const c_double,
    sigma: *const c_double,
    len: size_t,
    out_hvp: *mut c_double,
) -> AdjTsStatus {
    guard(|| {
        if p.is_null() || out_hvp.is_null() {
            set_error("null pointer argument");
            return AdjTsStatus::NullPointer;
        }
        let inst = &(*p).inst;
        let (Some(params), Some(sigma)) = (slice_from(params, len), slice_from(sigma, len)) else {
            set_error("null buffer argument");
            return AdjTsStatus::NullPointer;
        };
        if params.len() != inst.p0.len() {
            set_error("parameter length mismatch");
            return AdjTsStatus::InvalidArgument;
        }
        match hvp(
            &inst.eval_context(),
            &Vector::from_column_slice(params),
            &Vector::from_column_slice(sigma),
            HvpTarget::WrtParams,
            &Storage::Full,
        ) {
            Ok(res) => {
                std::slice::from_raw_parts_mut(out_hvp, len).copy_from_slice(res.hvp.as_slice());
                AdjTsStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                AdjTsStatus::SolveFailed
            }
        }
    })
}

/// Plan an optimal checkpointing schedule.
///
/// # Safety
/// `out` must be a valid pointer; the returned handle must be released with
/// [`adjts_schedule_free`].
#[no_mangle]
pub unsafe extern "C" fn adjts_schedule_plan(
    num_steps: size_t,
    capacity: size_t,
    mode: AdjTsCheckpointMode,
    out: *mut *mut AdjTsSchedule,
) -> AdjTsStatus {
    guard(|| {
        if out.is_null() {
            set_error("null pointer argument");
            return AdjTsStatus::NullPointer;
        }
        match adjoint_ts::checkpoint::plan_schedule(num_steps, capacity, to_mode(mode)) {
            Ok(schedule) => {
                *out = Box::into_raw(Box::new(AdjTsSchedule { schedule }));
                AdjTsStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                AdjTsStatus::InvalidArgument
            }
        }
    })
}

/// Release a schedule handle. Passing NULL is a no-op.
///
/// # Safety
/// `s` must be a handle from [`adjts_schedule_plan`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn adjts_schedule_free(s: *mut AdjTsSchedule) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Number of recomputed forward steps the schedule incurs.
///
/// # Safety
/// `s` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn adjts_schedule_recomputations(
    s: *const AdjTsSchedule,
    out: *mut size_t,
) -> AdjTsStatus {
    guard(|| {
        if s.is_null() || out.is_null() {
            set_error("null pointer argument");
            return AdjTsStatus::NullPointer;
        }
        *out = (*s).schedule.recomputations;
        AdjTsStatus::Ok
    })
}

/// Number of actions in the schedule.
///
/// # Safety
/// `s` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn adjts_schedule_num_actions(
    s: *const AdjTsSchedule,
    out: *mut size_t,
) -> AdjTsStatus {
    guard(|| {
        if s.is_null() || out.is_null() {
            set_error("null pointer argument");
            return AdjTsStatus::NullPointer;
        }
        *out = (*s).schedule.actions.len();
        AdjTsStatus::Ok
    })
}

/// Decode action `idx`: kind plus two operands (`Advance` uses both as
/// `from`/`to`; the others put the step index in the first).
///
/// # Safety
/// All output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn adjts_schedule_action(
    s: *const AdjTsSchedule,
    idx: size_t,
    out_kind: *mut AdjTsActionKind,
    out_a: *mut size_t,
    out_b: *mut size_t,
) -> AdjTsStatus {
    guard(|| {
        if s.is_null() || out_kind.is_null() || out_a.is_null() || out_b.is_null() {
            set_error("null pointer argument");
            return AdjTsStatus::NullPointer;
        }
        let actions = &(*s).schedule.actions;
        let Some(action) = actions.get(idx) else {
            set_error("action index out of range");
            return AdjTsStatus::InvalidArgument;
        };
        let (kind, a, b) = match *action {
            Action::Store(i) => (AdjTsActionKind::Store, i, 0),
            Action::Advance { from, to } => (AdjTsActionKind::Advance, from, to),
            Action::Restore(i) => (AdjTsActionKind::Restore, i, 0),
            Action::AdjoinStep(i) => (AdjTsActionKind::AdjoinStep, i, 0),
            Action::Discard(i) => (AdjTsActionKind::Discard, i, 0),
        };
        *out_kind = kind;
        *out_a = a;
        *out_b = b;
        AdjTsStatus::Ok
    })
}

/// Copy the last error message (NUL-terminated, possibly truncated) into
/// `buf`. Returns the full message length in bytes, excluding the NUL.
///
/// # Safety
/// `buf` must point to `len` writable bytes (may be NULL to query the size).
#[no_mangle]
pub unsafe extern "C" fn adjts_last_error_message(buf: *mut c_char, len: size_t) -> size_t {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            // always terminate
            *buf.add(n - 1) = 0;
        }
        bytes.len() - 1
    })
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn adjts_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// ABI sanity value: returns 0x41445453 ("ADTS").
#[no_mangle]
pub extern "C" fn adjts_abi_magic() -> c_int {
    0x4144_5453
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    unsafe fn make(name: &str) -> *mut AdjTsProblem {
        let cname = CString::new(name).unwrap();
        let mut handle: *mut AdjTsProblem = ptr::null_mut();
        let status = adjts_problem_create(cname.as_ptr(), 0, AdjTsMethod::Rk4, 0.0, 0, &mut handle);
        assert_eq!(status, AdjTsStatus::Ok);
        handle
    }

    #[test]
    fn create_query_and_free() {
        unsafe {
            let h = make("linear-test");
            let mut np = 0usize;
            assert_eq!(adjts_problem_num_params(h, &mut np), AdjTsStatus::Ok);
            assert_eq!(np, 2);
            let mut nd = 0usize;
            assert_eq!(adjts_problem_num_states(h, &mut nd), AdjTsStatus::Ok);
            assert_eq!(nd, 3);
            adjts_problem_free(h);
        }
    }

    #[test]
    fn unknown_problem_reports_error() {
        unsafe {
            let cname = CString::new("not-a-problem").unwrap();
            let mut handle: *mut AdjTsProblem = ptr::null_mut();
            let status =
                adjts_problem_create(cname.as_ptr(), 0, AdjTsMethod::Rk4, 0.0, 0, &mut handle);
            assert_eq!(status, AdjTsStatus::UnknownProblem);
            let mut buf = vec![0 as c_char; 256];
            let n = adjts_last_error_message(buf.as_mut_ptr(), buf.len());
            assert!(n > 0);
        }
    }

    #[test]
    fn null_pointers_rejected() {
        unsafe {
            let mut out = 0.0f64;
            assert_eq!(
                adjts_cost(ptr::null(), ptr::null(), 0, &mut out),
                AdjTsStatus::NullPointer
            );
            assert_eq!(
                adjts_problem_create(ptr::null(), 0, AdjTsMethod::Rk4, 0.0, 0, ptr::null_mut()),
                AdjTsStatus::NullPointer
            );
        }
    }

    #[test]
    fn gradient_matches_direct_library_call() {
        unsafe {
            let h = make("linear-test");
            let mut np = 0usize;
            adjts_problem_num_params(h, &mut np);
            let mut p0 = vec![0.0f64; np];
            assert_eq!(
                adjts_problem_initial_params(h, p0.as_mut_ptr(), np),
                AdjTsStatus::Ok
            );
            let mut c = 0.0f64;
            let mut g = vec![0.0f64; np];
            let status = adjts_gradient(
                h,
                p0.as_ptr(),
                np,
                0,
                AdjTsCheckpointMode::SolutionOnly,
                &mut c,
                g.as_mut_ptr(),
            );
            assert_eq!(status, AdjTsStatus::Ok);

            // reference values straight through the library
            let inst = by_name(
                "linear-test",
                &InstanceOpts {
                    method: Some(Method::Rk4),
                    ..Default::default()
                },
            )
            .unwrap();
            let reference = gradient(&inst.eval_context(), &inst.p0, &Storage::Full).unwrap();
            assert_eq!(c.to_bits(), reference.cost.to_bits());
            for (a, b) in g.iter().zip(reference.gradient.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }

            // checkpointed variant agrees bitwise
            let mut c2 = 0.0f64;
            let mut g2 = vec![0.0f64; np];
            let status = adjts_gradient(
                h,
                p0.as_ptr(),
                np,
                3,
                AdjTsCheckpointMode::SolutionWithStages,
                &mut c2,
                g2.as_mut_ptr(),
            );
            assert_eq!(status, AdjTsStatus::Ok);
            assert_eq!(c.to_bits(), c2.to_bits());
            for (a, b) in g.iter().zip(g2.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
            adjts_problem_free(h);
        }
    }

    #[test]
    fn hvp_runs_and_is_symmetric() {
        unsafe {
            let h = make("linear-test");
            let p0 = [0.4f64, -0.3];
            let s1 = [1.0f64, 0.0];
            let s2 = [0.0f64, 1.0];
            let mut h1 = [0.0f64; 2];
            let mut h2 = [0.0f64; 2];
            assert_eq!(
                adjts_hvp(h, p0.as_ptr(), s1.as_ptr(), 2, h1.as_mut_ptr()),
                AdjTsStatus::Ok
            );
            assert_eq!(
                adjts_hvp(h, p0.as_ptr(), s2.as_ptr(), 2, h2.as_mut_ptr()),
                AdjTsStatus::Ok
            );
            // cross entries of the Hessian agree
            assert!((h1[1] - h2[0]).abs() < 1e-12);
            adjts_problem_free(h);
        }
    }

    #[test]
    fn schedule_counts_through_ffi() {
        unsafe {
            let mut s: *mut AdjTsSchedule = ptr::null_mut();
            assert_eq!(
                adjts_schedule_plan(10, 3, AdjTsCheckpointMode::SolutionOnly, &mut s),
                AdjTsStatus::Ok
            );
            let mut r = 0usize;
            assert_eq!(adjts_schedule_recomputations(s, &mut r), AdjTsStatus::Ok);
            assert_eq!(r, 15);
            let mut n = 0usize;
            assert_eq!(adjts_schedule_num_actions(s, &mut n), AdjTsStatus::Ok);
            assert!(n > 0);
            let mut kind = AdjTsActionKind::Store;
            let (mut a, mut b) = (0usize, 0usize);
            assert_eq!(
                adjts_schedule_action(s, 0, &mut kind, &mut a, &mut b),
                AdjTsStatus::Ok
            );
            assert_eq!(kind, AdjTsActionKind::Store);
            assert_eq!(a, 0);
            adjts_schedule_free(s);

            let mut s2: *mut AdjTsSchedule = ptr::null_mut();
            assert_eq!(
                adjts_schedule_plan(10, 3, AdjTsCheckpointMode::SolutionWithStages, &mut s2),
                AdjTsStatus::Ok
            );
            let mut r2 = 0usize;
            adjts_schedule_recomputations(s2, &mut r2);
            assert_eq!(r2, 6);
            adjts_schedule_free(s2);

            // zero capacity is rejected
            let mut s3: *mut AdjTsSchedule = ptr::null_mut();
            assert_eq!(
                adjts_schedule_plan(10, 0, AdjTsCheckpointMode::SolutionOnly, &mut s3),
                AdjTsStatus::InvalidArgument
            );
        }
    }

    #[test]
    fn buffer_too_small_detected() {
        unsafe {
            let h = make("linear-test");
            let mut buf = [0.0f64; 1];
            assert_eq!(
                adjts_problem_initial_params(h, buf.as_mut_ptr(), 1),
                AdjTsStatus::BufferTooSmall
            );
            adjts_problem_free(h);
        }
    }

    #[test]
    fn version_and_magic() {
        let v = adjts_version();
        assert!(!v.is_null());
        assert_eq!(adjts_abi_magic(), 0x4144_5453);
    }
}

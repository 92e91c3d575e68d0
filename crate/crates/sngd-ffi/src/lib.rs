//! C ABI for `sngd`.
//!
//! Objects cross the boundary as opaque handles created by `*_new` / `*_from`
//! functions and released with the matching `*_free`. Every function returns
//! an [`SngdStatus`]; on failure a description is available from
//! [`sngd_last_error`] until the next call on the same thread. Arrays are
//! caller-owned buffers with explicit lengths, matrices are row-major.
//! Strings returned by the library must be released with
//! [`sngd_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use sngd::baselines::{adam_step, AdamState};
use sngd::cli::{run_bench, RunConfig};
use sngd::gaussian::{det_newton_step_full, det_newton_step_structured, mc_vi_step, Estimator, GaussState, MCConfig};
use sngd::groups::{GroupKind, StructuredFactor};
use sngd::linalg::{Matrix, Vector};
use sngd::objectives::{dixon_price, quadratic, rosenbrock, Objective};
use sngd::SngdError;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SngdStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Invalid configuration, kind or argument value.
    InvalidArgument = 2,
    /// Buffer or vector length does not match the object.
    DimensionMismatch = 3,
    /// Non-finite values, failed factorizations or a step that left the
    /// domain; the object passed in is left unchanged.
    Numerical = 4,
    /// The objective lacks an oracle the method needs.
    Unsupported = 5,
    /// Input/output or serialization failure.
    Io = 6,
    /// A Rust panic was caught at the boundary.
    Internal = 7,
}

/// Factor structures of the precision square root `B`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SngdGroup {
    /// Dense invertible `B`.
    Full = 0,
    /// Positive diagonal `B`.
    Diagonal = 1,
    /// Block upper triangular with a dense `k1 × k1` corner.
    BlockUpper = 2,
    /// Block lower triangular with a dense `k1 × k1` corner.
    BlockLower = 3,
    /// Upper Heisenberg structure with dense corners `k1` and `k2`.
    HeisUpper = 4,
    /// Lower Heisenberg structure with dense corners `k1` and `k2`.
    HeisLower = 5,
}

/// Opaque structured factor.
pub struct SngdFactor(StructuredFactor);

/// Opaque objective.
pub struct SngdObjective(Box<dyn Objective>);

/// Opaque Gaussian search state `N(μ, (BBᵀ)⁻¹)`.
pub struct SngdGauss(GaussState);

/// Opaque Adam state.
pub struct SngdAdam(AdamState);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &SngdError) -> SngdStatus {
    match e {
        SngdError::Config(_) | SngdError::KindMismatch(_) => SngdStatus::InvalidArgument,
        SngdError::Dimension(_) => SngdStatus::DimensionMismatch,
        SngdError::Numerical(_) => SngdStatus::Numerical,
        SngdError::Capability(_) => SngdStatus::Unsupported,
        _ => SngdStatus::Io,
    }
}

/// Runs `f`, records any error and converts panics into `Internal`.
fn guard(f: impl FnOnce() -> Result<(), (SngdStatus, String)>) -> SngdStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SngdStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            SngdStatus::Internal
        }
    }
}

fn lib<T>(r: sngd::Result<T>) -> Result<T, (SngdStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(name: &str) -> (SngdStatus, String) {
    (SngdStatus::NullPointer, format!("{name} is null"))
}

fn invalid(msg: impl Into<String>) -> (SngdStatus, String) {
    (SngdStatus::InvalidArgument, msg.into())
}

unsafe fn slice<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], (SngdStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, name: &str) -> Result<&'a mut [f64], (SngdStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, (SngdStatus, String)> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn handle_mut<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, (SngdStatus, String)> {
    p.as_mut().ok_or_else(|| null(name))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), (SngdStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn copy_out(dst: &mut [f64], src: impl ExactSizeIterator<Item = f64>) -> Result<(), (SngdStatus, String)> {
    if dst.len() != src.len() {
        return Err((SngdStatus::DimensionMismatch, format!("buffer has length {}, need {}", dst.len(), src.len())));
    }
    for (d, s) in dst.iter_mut().zip(src) {
        *d = s;
    }
    Ok(())
}

fn row_major(m: &Matrix) -> Vec<f64> {
    (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect()
}

unsafe fn string_out(out: *mut *mut c_char, s: String) -> Result<(), (SngdStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = CString::new(s).map_err(|e| (SngdStatus::Io, e.to_string()))?.into_raw();
    Ok(())
}

unsafe fn str_in<'a>(p: *const c_char, name: &str) -> Result<&'a str, (SngdStatus, String)> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|e| invalid(format!("{name} is not UTF-8: {e}")))
}

// ---------------------------------------------------------------------------
// Library information and errors.
// ---------------------------------------------------------------------------

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sngd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn sngd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sngd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---------------------------------------------------------------------------
// Factors.
// ---------------------------------------------------------------------------

fn group_kind(group: SngdGroup, p: usize, k1: usize, k2: usize) -> GroupKind {
    match group {
        SngdGroup::Full => GroupKind::Full { p },
        SngdGroup::Diagonal => GroupKind::Diagonal { p },
        SngdGroup::BlockUpper => GroupKind::BlockUpper { p, k: k1 },
        SngdGroup::BlockLower => GroupKind::BlockLower { p, k: k1 },
        SngdGroup::HeisUpper => GroupKind::HeisUpper { p, k1, k2 },
        SngdGroup::HeisLower => GroupKind::HeisLower { p, k1, k2 },
    }
}

/// Creates `B = scale · I` in the given structure. `k2` is ignored by the
/// block-triangular kinds and both block sizes by `Full` and `Diagonal`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn sngd_factor_new(
    group: SngdGroup,
    p: usize,
    k1: usize,
    k2: usize,
    scale: f64,
    out: *mut *mut SngdFactor,
) -> SngdStatus {
    guard(|| {
        let f = lib(StructuredFactor::scaled_identity(&group_kind(group, p, k1, k2), scale))?;
        store(out, SngdFactor(f))
    })
}

/// Creates a factor from a dense row-major `p × p` matrix that must already
/// have the structure's sparsity pattern.
///
/// # Safety
/// `dense` must point to `p * p` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sngd_factor_from_dense(
    group: SngdGroup,
    p: usize,
    k1: usize,
    k2: usize,
    dense: *const f64,
    out: *mut *mut SngdFactor,
) -> SngdStatus {
    guard(|| {
        let d = slice(dense, p * p, "dense")?;
        let m = Matrix::from_row_slice(p, p, d);
        let f = lib(StructuredFactor::from_dense(&group_kind(group, p, k1, k2), &m))?;
        store(out, SngdFactor(f))
    })
}

/// Releases a factor. Null is ignored.
///
/// # Safety
/// `f` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sngd_factor_free(f: *mut SngdFactor) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

/// Side length `p` of the factor (0 for a null handle).
///
/// # Safety
/// `f` must be null or a live factor handle.
#[no_mangle]
pub unsafe extern "C" fn sngd_factor_dim(f: *const SngdFactor) -> usize {
    f.as_ref().map_or(0, |f| f.0.dim())
}

/// Writes `B` (row-major, `p * p` entries).
///
/// # Safety
/// `f` must be a live handle and `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sngd_factor_dense(f: *const SngdFactor, out: *mut f64, len: usize) -> SngdStatus {
    guard(|| {
        let f = handle(f, "factor")?;
        copy_out(slice_mut(out, len, "out")?, row_major(&f.0.densify()).into_iter())
    })
}

/// Writes `S = BBᵀ` (row-major, `p * p` entries).
///
/// # Safety
/// `f` must be a live handle and `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sngd_factor_precision(f: *const SngdFactor, out: *mut f64, len: usize) -> SngdStatus {
    guard(|| {
        let f = handle(f, "factor")?;
        copy_out(slice_mut(out, len, "out")?, row_major(&f.0.precision_dense()).into_iter())
    })
}

/// Solves `BBᵀ x = rhs` in the factor's structured cost.
///
/// # Safety
/// `rhs` and `x` must each point to `p` doubles (`x` writable).
#[no_mangle]
pub unsafe extern "C" fn sngd_factor_precision_solve(
    f: *const SngdFactor,
    rhs: *const f64,
    x: *mut f64,
    p: usize,
) -> SngdStatus {
    guard(|| {
        let f = handle(f, "factor")?;
        if p != f.0.dim() {
            return Err((SngdStatus::DimensionMismatch, format!("factor has dimension {}, got {p}", f.0.dim())));
        }
        let b = Vector::from_column_slice(slice(rhs, p, "rhs")?);
        let sol = lib(f.0.precision_solve(&b))?;
        copy_out(slice_mut(x, p, "x")?, sol.iter().copied())
    })
}

/// `log |det B|`.
///
/// # Safety
/// `f` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sngd_factor_log_abs_det(f: *const SngdFactor, out: *mut f64) -> SngdStatus {
    guard(|| {
        let f = handle(f, "factor")?;
        let out = handle_mut(out, "out")?;
        *out = f.0.log_abs_det();
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Objectives.
// ---------------------------------------------------------------------------

/// Rosenbrock function in `p` dimensions (scaled by `1/p`).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sngd_objective_rosenbrock(p: usize, out: *mut *mut SngdObjective) -> SngdStatus {
    guard(|| store(out, SngdObjective(Box::new(lib(rosenbrock(p))?))))
}

/// Dixon-Price function in `p` dimensions (scaled by `1/p`).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sngd_objective_dixon_price(p: usize, out: *mut *mut SngdObjective) -> SngdStatus {
    guard(|| store(out, SngdObjective(Box::new(lib(dixon_price(p))?))))
}

/// Quadratic `½wᵀHw − cᵀw` with symmetric row-major `H` (`p * p`) and `c`.
///
/// # Safety
/// `h` must point to `p * p` doubles, `c` to `p` doubles, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sngd_objective_quadratic(
    h: *const f64,
    c: *const f64,
    p: usize,
    out: *mut *mut SngdObjective,
) -> SngdStatus {
    guard(|| {
        let hm = Matrix::from_row_slice(p, p, slice(h, p * p, "h")?);
        let cv = Vector::from_column_slice(slice(c, p, "c")?);
        store(out, SngdObjective(Box::new(lib(quadratic(hm, cv))?)))
    })
}

/// Releases an objective. Null is ignored.
///
/// # Safety
/// `o` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sngd_objective_free(o: *mut SngdObjective) {
    if !o.is_null() {
        drop(Box::from_raw(o));
    }
}

/// Dimension of the objective (0 for a null handle).
///
/// # Safety
/// `o` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sngd_objective_dim(o: *const SngdObjective) -> usize {
    o.as_ref().map_or(0, |o| o.0.dim())
}

unsafe fn point(o: &SngdObjective, w: *const f64, p: usize) -> Result<Vector, (SngdStatus, String)> {
    if p != o.0.dim() {
        return Err((SngdStatus::DimensionMismatch, format!("objective has dimension {}, got {p}", o.0.dim())));
    }
    Ok(Vector::from_column_slice(slice(w, p, "w")?))
}

/// Loss value at `w`.
///
/// # Safety
/// `w` must point to `p` doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sngd_objective_eval(
    o: *const SngdObjective,
    w: *const f64,
    p: usize,
    out: *mut f64,
) -> SngdStatus {
    guard(|| {
        let o = handle(o, "objective")?;
        let w = point(o, w, p)?;
        *handle_mut(out, "out")? = o.0.eval(&w);
        Ok(())
    })
}

/// Gradient at `w` written to `grad` (`p` entries).
///
/// # Safety
/// `w` and `grad` must each point to `p` doubles (`grad` writable).
#[no_mangle]
pub unsafe extern "C" fn sngd_objective_grad(
    o: *const SngdObjective,
    w: *const f64,
    p: usize,
    grad: *mut f64,
) -> SngdStatus {
    guard(|| {
        let o = handle(o, "objective")?;
        let w = point(o, w, p)?;
        copy_out(slice_mut(grad, p, "grad")?, o.0.grad(&w).iter().copied())
    })
}

/// Hessian-vector product `∇²ℓ(w) v` written to `out` (`p` entries).
///
/// # Safety
/// `w`, `v` and `out` must each point to `p` doubles (`out` writable).
#[no_mangle]
pub unsafe extern "C" fn sngd_objective_hvp(
    o: *const SngdObjective,
    w: *const f64,
    v: *const f64,
    p: usize,
    out: *mut f64,
) -> SngdStatus {
    guard(|| {
        let o = handle(o, "objective")?;
        let w = point(o, w, p)?;
        let v = Vector::from_column_slice(slice(v, p, "v")?);
        copy_out(slice_mut(out, p, "out")?, o.0.hvp(&w, &v).iter().copied())
    })
}

// ---------------------------------------------------------------------------
// Gaussian search state.
// ---------------------------------------------------------------------------

/// Creates the state `N(μ, (BBᵀ)⁻¹)` with step size `beta` and entropy
/// weight `gamma`. The factor is copied; the caller keeps ownership.
///
/// # Safety
/// `mu` must point to `p` doubles, `factor` must be live, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sngd_gauss_new(
    mu: *const f64,
    p: usize,
    factor: *const SngdFactor,
    beta: f64,
    gamma: f64,
    out: *mut *mut SngdGauss,
) -> SngdStatus {
    guard(|| {
        let f = handle(factor, "factor")?;
        let mu = Vector::from_column_slice(slice(mu, p, "mu")?);
        store(out, SngdGauss(lib(GaussState::new(mu, f.0.clone(), beta, gamma))?))
    })
}

/// Releases a Gaussian state. Null is ignored.
///
/// # Safety
/// `g` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sngd_gauss_free(g: *mut SngdGauss) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Update rule used by [`sngd_gauss_step`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SngdGaussMethod {
    /// Deterministic Newton-like step with a dense Hessian (any factor kind is
    /// densified; intended for `Full`).
    FullNewton = 0,
    /// Deterministic structured step using Hessian-vector products and the
    /// Hessian diagonal (triangular and Heisenberg kinds).
    Structured = 1,
    /// Monte-Carlo variational step with second-order gradient estimates.
    MonteCarlo = 2,
    /// Monte-Carlo variational step with first-order (Stein) estimates.
    MonteCarloFirstOrder = 3,
}

/// Advances the state by one step in place. `samples` and `seed` are used
/// by the Monte-Carlo methods only. On failure the state is unchanged.
///
/// # Safety
/// `g` and `o` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn sngd_gauss_step(
    g: *mut SngdGauss,
    o: *const SngdObjective,
    method: SngdGaussMethod,
    samples: usize,
    seed: u64,
) -> SngdStatus {
    guard(|| {
        let g = handle_mut(g, "state")?;
        let o = handle(o, "objective")?;
        let mc = |estimator| MCConfig { samples, seed, estimator };
        let next = match method {
            SngdGaussMethod::FullNewton => det_newton_step_full(&g.0, o.0.as_ref()),
            SngdGaussMethod::Structured => det_newton_step_structured(&g.0, o.0.as_ref()),
            SngdGaussMethod::MonteCarlo => mc_vi_step(&g.0, o.0.as_ref(), &mc(Estimator::Hessian)),
            SngdGaussMethod::MonteCarloFirstOrder => mc_vi_step(&g.0, o.0.as_ref(), &mc(Estimator::SteinFirstOrder)),
        };
        g.0 = lib(next)?;
        Ok(())
    })
}

/// Dimension of the state (0 for a null handle).
///
/// # Safety
/// `g` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sngd_gauss_dim(g: *const SngdGauss) -> usize {
    g.as_ref().map_or(0, |g| g.0.dim())
}

/// Writes the mean `μ` (`p` entries).
///
/// # Safety
/// `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sngd_gauss_mean(g: *const SngdGauss, out: *mut f64, len: usize) -> SngdStatus {
    guard(|| {
        let g = handle(g, "state")?;
        copy_out(slice_mut(out, len, "out")?, g.0.mu.iter().copied())
    })
}

/// Writes the precision `S = BBᵀ` (row-major, `p * p` entries).
///
/// # Safety
/// `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sngd_gauss_precision(g: *const SngdGauss, out: *mut f64, len: usize) -> SngdStatus {
    guard(|| {
        let g = handle(g, "state")?;
        copy_out(slice_mut(out, len, "out")?, row_major(&g.0.precision_dense()).into_iter())
    })
}

/// Serializes the state as JSON; release the string with
/// [`sngd_string_free`].
///
/// # Safety
/// `g` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sngd_gauss_to_json(g: *const SngdGauss, out: *mut *mut c_char) -> SngdStatus {
    guard(|| {
        let g = handle(g, "state")?;
        string_out(out, lib(g.0.to_checkpoint_json())?)
    })
}

/// Restores a state from [`sngd_gauss_to_json`] output.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sngd_gauss_from_json(json: *const c_char, out: *mut *mut SngdGauss) -> SngdStatus {
    guard(|| {
        let s = str_in(json, "json")?;
        store(out, SngdGauss(lib(GaussState::from_checkpoint_json(s))?))
    })
}

// ---------------------------------------------------------------------------
// Adam.
// ---------------------------------------------------------------------------

/// Creates an Adam state at `w0` with learning rate `lr` (β₁ = 0.9,
/// β₂ = 0.999, ε = 1e-8).
///
/// # Safety
/// `w0` must point to `p` doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sngd_adam_new(w0: *const f64, p: usize, lr: f64, out: *mut *mut SngdAdam) -> SngdStatus {
    guard(|| {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {lr}")));
        }
        let w = Vector::from_column_slice(slice(w0, p, "w0")?);
        store(out, SngdAdam(AdamState::new(w).with_lr(lr)))
    })
}

/// Releases an Adam state. Null is ignored.
///
/// # Safety
/// `a` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sngd_adam_free(a: *mut SngdAdam) {
    if !a.is_null() {
        drop(Box::from_raw(a));
    }
}

/// One Adam step on the objective's gradient, in place.
///
/// # Safety
/// `a` and `o` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn sngd_adam_step(a: *mut SngdAdam, o: *const SngdObjective) -> SngdStatus {
    guard(|| {
        let a = handle_mut(a, "adam")?;
        let o = handle(o, "objective")?;
        if a.0.params.len() != o.0.dim() {
            return Err((SngdStatus::DimensionMismatch, "adam state and objective dimensions differ".into()));
        }
        a.0 = lib(adam_step(&a.0, &o.0.grad(&a.0.params)))?;
        Ok(())
    })
}

/// Writes the current parameters (`p` entries).
///
/// # Safety
/// `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sngd_adam_params(a: *const SngdAdam, out: *mut f64, len: usize) -> SngdStatus {
    guard(|| {
        let a = handle(a, "adam")?;
        copy_out(slice_mut(out, len, "out")?, a.0.params.iter().copied())
    })
}

// ---------------------------------------------------------------------------
// Whole runs.
// ---------------------------------------------------------------------------

/// Executes a JSON run configuration (the format read by `sngd bench`) and
/// writes the loss after each iteration to `losses`. `capacity` must be at
/// least the configured iteration count; `written` receives the number of
/// losses written (also on a numerical failure, which reports the iterations
/// completed before it).
///
/// # Safety
/// `config_json` must be NUL-terminated, `losses` must point to `capacity`
/// writable doubles and `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sngd_run(
    config_json: *const c_char,
    seed: u64,
    losses: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> SngdStatus {
    guard(|| {
        let written = handle_mut(written, "written")?;
        *written = 0;
        let cfg = lib(RunConfig::from_json(str_in(config_json, "config_json")?))?;
        if capacity < cfg.iters {
            return Err((SngdStatus::DimensionMismatch, format!("capacity {capacity} < iters {}", cfg.iters)));
        }
        let out = slice_mut(losses, capacity, "losses")?;
        let (records, err) = match run_bench(&cfg, seed) {
            Ok(r) => (r, None),
            Err(f) => (f.records, Some(f.error)),
        };
        for (dst, r) in out.iter_mut().zip(&records) {
            *dst = r.loss_mean;
        }
        *written = records.len();
        match err {
            None => Ok(()),
            Some(e) => lib(Err(e)),
        }
    })
}

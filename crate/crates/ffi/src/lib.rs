//! C interface to trained SAEs and ensembles.
//!
//! Handles are opaque and owned by the caller, who releases them with
//! [`sae_target_free`]. Every fallible function returns an [`SaeStatus`];
//! on failure [`sae_last_error`] describes the most recent error on the
//! calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ndarray::{ArrayView2, ArrayViewMut2};
use sae_ensemble::data::load_manifest;
use sae_ensemble::ensemble::Target;
use sae_ensemble::metrics::{evaluate, EvalOptions};
use sae_ensemble::Error;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Io = 4,
    Corrupt = 5,
    Numerical = 6,
    Panic = 7,
}

/// A loaded single SAE or ensemble.
pub struct SaeTarget {
    inner: Target,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> SaeStatus {
    match err {
        Error::DimensionMismatch { .. } => SaeStatus::DimensionMismatch,
        Error::Io { .. } => SaeStatus::Io,
        Error::Corrupt { .. } | Error::Json(_) => SaeStatus::Corrupt,
        Error::Divergence { .. } | Error::NonConvergence { .. } | Error::ZeroVariance(_) | Error::Undefined(_) => {
            SaeStatus::Numerical
        }
        _ => SaeStatus::InvalidArgument,
    }
}

fn fail(status: SaeStatus, msg: &str) -> SaeStatus {
    set_last_error(msg);
    status
}

fn guard(f: impl FnOnce() -> Result<(), SaeStatus>) -> SaeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            SaeStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(SaeStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: sae_ensemble::Result<T>) -> Result<T, SaeStatus> {
    r.map_err(|e| fail(status_of(&e), &e.to_string()))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, SaeStatus> {
    if p.is_null() {
        return Err(fail(SaeStatus::NullPointer, "path is null"));
    }
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| fail(SaeStatus::InvalidArgument, "path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn target_ref<'a>(t: *const SaeTarget) -> Result<&'a Target, SaeStatus> {
    if t.is_null() {
        return Err(fail(SaeStatus::NullPointer, "target handle is null"));
    }
    Ok(unsafe { &(*t).inner })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sae_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn sae_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads an SAE checkpoint file or an ensemble directory.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sae_target_load(path: *const c_char, out: *mut *mut SaeTarget) -> SaeStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(SaeStatus::NullPointer, "out is null"));
        }
        unsafe { *out = ptr::null_mut() };
        let path = unsafe { path_arg(path) }?;
        let inner = lift(Target::load(&path))?;
        unsafe { *out = Box::into_raw(Box::new(SaeTarget { inner })) };
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `target` must come from [`sae_target_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sae_target_free(target: *mut SaeTarget) {
    if !target.is_null() {
        drop(unsafe { Box::from_raw(target) });
    }
}

/// Writes input dimension `d`, feature count `m` and member count `J`.
/// Any output pointer may be null.
///
/// # Safety
/// `target` must be a live handle; non-null outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn sae_target_shape(
    target: *const SaeTarget,
    d: *mut usize,
    m: *mut usize,
    members: *mut usize,
) -> SaeStatus {
    guard(|| {
        let t = unsafe { target_ref(target) }?;
        for (p, v) in [(d, t.d()), (m, t.feature_count()), (members, t.members())] {
            if !p.is_null() {
                unsafe { *p = v };
            }
        }
        Ok(())
    })
}

#[allow(clippy::too_many_arguments)]
unsafe fn batch_call(
    target: *const SaeTarget,
    input: *const f64,
    rows: usize,
    cols: usize,
    output: *mut f64,
    out_len: usize,
    out_cols: impl Fn(&Target) -> usize,
    f: impl Fn(&Target, ArrayView2<'_, f64>) -> sae_ensemble::Result<ndarray::Array2<f64>>,
) -> SaeStatus {
    guard(|| {
        let t = unsafe { target_ref(target) }?;
        if input.is_null() || output.is_null() {
            return Err(fail(SaeStatus::NullPointer, "input or output is null"));
        }
        if rows == 0 {
            return Err(fail(SaeStatus::InvalidArgument, "rows must be positive"));
        }
        if cols != t.d() {
            return Err(fail(
                SaeStatus::DimensionMismatch,
                &format!("input has {cols} columns, target expects {}", t.d()),
            ));
        }
        let oc = out_cols(t);
        if out_len != rows * oc {
            return Err(fail(
                SaeStatus::DimensionMismatch,
                &format!("output holds {out_len} values, need {}", rows * oc),
            ));
        }
        let x = unsafe { ArrayView2::from_shape_ptr((rows, cols), input) };
        let y = lift(f(t, x))?;
        let mut dst = unsafe { ArrayViewMut2::from_shape_ptr((rows, oc), output) };
        dst.assign(&y);
        Ok(())
    })
}

/// Feature coefficients for `rows` row-major inputs of width `cols`.
/// `output` receives `rows * m` values, row-major.
///
/// # Safety
/// `input` must hold `rows * cols` values and `output` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn sae_target_encode(
    target: *const SaeTarget,
    input: *const f64,
    rows: usize,
    cols: usize,
    output: *mut f64,
    out_len: usize,
) -> SaeStatus {
    unsafe { batch_call(target, input, rows, cols, output, out_len, Target::feature_count, Target::encode_batch) }
}

/// Reconstructions for `rows` row-major inputs; `output` receives
/// `rows * d` values.
///
/// # Safety
/// `input` must hold `rows * cols` values and `output` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn sae_target_reconstruct(
    target: *const SaeTarget,
    input: *const f64,
    rows: usize,
    cols: usize,
    output: *mut f64,
    out_len: usize,
) -> SaeStatus {
    unsafe { batch_call(target, input, rows, cols, output, out_len, Target::d, Target::reconstruct_batch) }
}

/// Evaluates the target on a shard manifest and returns the metrics report
/// as a JSON string in `out_json`, released with [`sae_string_free`].
/// `taus` may be null when `n_taus` is 0 (the default threshold is used).
///
/// # Safety
/// `manifest` must be a NUL-terminated string, `taus` must hold `n_taus`
/// values and `out_json` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sae_target_evaluate_json(
    target: *const SaeTarget,
    manifest: *const c_char,
    taus: *const f64,
    n_taus: usize,
    out_json: *mut *mut c_char,
) -> SaeStatus {
    guard(|| {
        if out_json.is_null() {
            return Err(fail(SaeStatus::NullPointer, "out_json is null"));
        }
        unsafe { *out_json = ptr::null_mut() };
        let t = unsafe { target_ref(target) }?;
        let path = unsafe { path_arg(manifest) }?;
        let mut opts = EvalOptions::default();
        if n_taus > 0 {
            if taus.is_null() {
                return Err(fail(SaeStatus::NullPointer, "taus is null"));
            }
            opts.taus = unsafe { std::slice::from_raw_parts(taus, n_taus) }.to_vec();
        }
        let data = lift(load_manifest(&path))?;
        let report = lift(evaluate(t, &data, &opts))?;
        let json = serde_json::to_string(&report).map_err(|e| fail(SaeStatus::Corrupt, &e.to_string()))?;
        let c = CString::new(json).map_err(|_| fail(SaeStatus::Corrupt, "report contains NUL"))?;
        unsafe { *out_json = c.into_raw() };
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sae_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

//! C interface to saved lcnn model bundles.
//!
//! Every function returns an [`LcnnStatus`]. On failure a message is kept per
//! thread and can be read with [`lcnn_last_error`]. Handles come from
//! [`lcnn_bundle_load`] or [`lcnn_bundle_from_json`] and are released with
//! [`lcnn_bundle_free`]. Input matrices are row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use lcnn::bundle::ModelBundle;
use lcnn::holdout::HoldoutOptions;
use lcnn::Error;
use ndarray::ArrayView2;

/// Opaque model handle.
pub struct LcnnBundle(ModelBundle);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LcnnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    UnknownTask = 4,
    Io = 5,
    Parse = 6,
    Numeric = 7,
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> LcnnStatus {
    match e {
        Error::DimensionMismatch { .. } => LcnnStatus::DimensionMismatch,
        Error::UnknownTask { .. } => LcnnStatus::UnknownTask,
        Error::Io(_) => LcnnStatus::Io,
        Error::Json(_) | Error::Csv(_) | Error::Parse { .. } | Error::MissingColumn(_) => LcnnStatus::Parse,
        Error::SingularDesign
        | Error::NotConverged { .. }
        | Error::Diverged { .. }
        | Error::RetriesExhausted { .. }
        | Error::AllTrialsDiverged(_) => LcnnStatus::Numeric,
        _ => LcnnStatus::InvalidArgument,
    }
}

struct Failure(LcnnStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(LcnnStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LcnnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            LcnnStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            LcnnStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(LcnnStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a>(p: *const LcnnBundle) -> Result<&'a ModelBundle, Failure> {
    p.as_ref().map(|b| &b.0).ok_or_else(|| null("bundle"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn rows<'a>(b: &ModelBundle, x: *const f64, n: usize) -> Result<ArrayView2<'a, f64>, Failure> {
    let d = b.model.x_dim();
    let flat = slice(x, n * d, "x")?;
    ArrayView2::from_shape((n, d), flat).map_err(|e| Failure(LcnnStatus::InvalidArgument, e.to_string()))
}

fn store(out: *mut *mut LcnnBundle, b: ModelBundle) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    unsafe { *out = Box::into_raw(Box::new(LcnnBundle(b))) };
    Ok(())
}

/// Loads a bundle file written by the `lcnn` tool.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn lcnn_bundle_load(path: *const c_char, out: *mut *mut LcnnBundle) -> LcnnStatus {
    guard(|| {
        let path = text(path, "path")?;
        store(out, ModelBundle::load(path)?)
    })
}

/// Parses a bundle from its JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn lcnn_bundle_from_json(json: *const c_char, out: *mut *mut LcnnBundle) -> LcnnStatus {
    guard(|| {
        let json = text(json, "json")?;
        store(out, ModelBundle::from_json(json)?)
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `bundle` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lcnn_bundle_free(bundle: *mut LcnnBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

/// Input width, number of tasks and task-parameter dimension (0 for
/// context-sensitive models). Null outputs are skipped.
///
/// # Safety
/// Non-null pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lcnn_bundle_info(
    bundle: *const LcnnBundle,
    x_dim: *mut usize,
    num_tasks: *mut usize,
    d_beta: *mut usize,
) -> LcnnStatus {
    guard(|| {
        let b = handle(bundle)?;
        let d = b.model.tasks().map_or(0, |t| t.dim());
        for (p, v) in [(x_dim, b.model.x_dim()), (num_tasks, b.model.num_tasks()), (d_beta, d)] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Index of the task with the given label.
///
/// # Safety
/// `label` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lcnn_task_index(
    bundle: *const LcnnBundle,
    label: *const c_char,
    out: *mut usize,
) -> LcnnStatus {
    guard(|| {
        let b = handle(bundle)?;
        let label = text(label, "label")?;
        let idx = b
            .task_index(label)
            .ok_or_else(|| Failure(LcnnStatus::UnknownTask, format!("no task labelled {label}")))?;
        *out.as_mut().ok_or_else(|| null("out"))? = idx;
        Ok(())
    })
}

/// Predictions in original units for `n` rows of `x` (`n × x_dim`) with
/// task indices `tasks`, written to `out` (`n` values).
///
/// # Safety
/// Pointers must cover the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn lcnn_predict(
    bundle: *const LcnnBundle,
    x: *const f64,
    tasks: *const usize,
    n: usize,
    out: *mut f64,
) -> LcnnStatus {
    guard(|| {
        let b = handle(bundle)?;
        let x = rows(b, x, n)?;
        let tasks = slice(tasks, n, "tasks")?;
        let pred = b.predict(x, tasks)?;
        slice_mut(out, n, "out")?.copy_from_slice(pred.as_slice().unwrap_or(&pred.to_vec()));
        Ok(())
    })
}

/// Predictions with explicit task parameters `beta` (`d` values).
///
/// # Safety
/// Pointers must cover the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn lcnn_predict_with_beta(
    bundle: *const LcnnBundle,
    x: *const f64,
    n: usize,
    beta: *const f64,
    d: usize,
    out: *mut f64,
) -> LcnnStatus {
    guard(|| {
        let b = handle(bundle)?;
        let x = rows(b, x, n)?;
        let pred = b.predict_with_beta(x, slice(beta, d, "beta")?)?;
        slice_mut(out, n, "out")?.copy_from_slice(&pred.to_vec());
        Ok(())
    })
}

/// Task parameters for a new task from `n` raw observations, with the
/// stored tasks as prior. Writes `d` values to `beta_out`, which must equal
/// the bundle's task-parameter dimension, and the objective value to
/// `objective_out` when non-null.
///
/// # Safety
/// Pointers must cover the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn lcnn_fit_new_task(
    bundle: *const LcnnBundle,
    x: *const f64,
    y: *const f64,
    n: usize,
    seed: u64,
    beta_out: *mut f64,
    d: usize,
    objective_out: *mut f64,
) -> LcnnStatus {
    guard(|| {
        let b = handle(bundle)?;
        let x = rows(b, x, n)?;
        let y = slice(y, n, "y")?;
        let opts = HoldoutOptions {
            seed,
            ..HoldoutOptions::default()
        };
        let fit = b.fit_new_task(x, y, opts)?;
        if fit.beta.len() != d {
            return Err(Failure(
                LcnnStatus::DimensionMismatch,
                format!("beta_out holds {d} values, model has {}", fit.beta.len()),
            ));
        }
        slice_mut(beta_out, d, "beta_out")?.copy_from_slice(&fit.beta);
        if let Some(o) = objective_out.as_mut() {
            *o = fit.objective;
        }
        Ok(())
    })
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn lcnn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

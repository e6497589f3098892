//! C ABI for the advreg library.
//!
//! Conventions:
//! - Every fallible function returns an `int` status code (`ADVREG_OK` on
//!   success) and writes results through out-pointers.
//! - Handles (`AdvregDataset`, `AdvregModel`) are opaque; free them with the
//!   matching `_free` function. Freeing a null pointer is a no-op.
//! - On failure, a thread-local message is available via
//!   [`advreg_last_error`]; the pointer stays valid until the next failing
//!   call on the same thread.
//!
//! The matching header is `include/advreg.h`; it is maintained by hand and
//! covered by the `header_matches_exports` test.

use std::cell::RefCell;
use std::ffi::{c_char, c_double, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use advreg::attack::attack_instance;
use advreg::baselines::fit_linreg;
use advreg::data::{evaluate_mse, load_dataset, make_training_split};
use advreg::model::{Dataset, ModelConfig, Weights};
use advreg::solver::{default_start, solve, SolverConfig};
use advreg::{BilevelProblem, SolveStatus};

pub const ADVREG_OK: c_int = 0;
pub const ADVREG_ERR_NULL_POINTER: c_int = 1;
pub const ADVREG_ERR_INVALID_ARGUMENT: c_int = 2;
pub const ADVREG_ERR_DATA: c_int = 3;
pub const ADVREG_ERR_SOLVER: c_int = 4;
pub const ADVREG_ERR_PANIC: c_int = 5;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: &str) {
    let owned = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(owned));
}

fn fail(code: c_int, message: &str) -> c_int {
    set_error(message);
    code
}

fn guard<F: FnOnce() -> c_int>(body: F) -> c_int {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(code) => code,
        Err(_) => fail(ADVREG_ERR_PANIC, "internal panic"),
    }
}

/// Opaque dataset handle.
pub struct AdvregDataset {
    inner: Dataset,
}

/// Opaque fitted-model handle.
pub struct AdvregModel {
    weights: Weights,
    status: c_int,
    residual_norm: c_double,
}

/// Returns the message of the last error on this thread, or null if none.
#[no_mangle]
pub extern "C" fn advreg_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(std::ptr::null(), |s| s.as_ptr())
    })
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn advreg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads a CSV with a header row; `label_column` names the label.
///
/// # Safety
/// `path` and `label_column` must be valid NUL-terminated strings and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn advreg_dataset_load(
    path: *const c_char,
    label_column: *const c_char,
    out: *mut *mut AdvregDataset,
) -> c_int {
    guard(|| {
        if path.is_null() || label_column.is_null() || out.is_null() {
            return fail(ADVREG_ERR_NULL_POINTER, "null pointer argument");
        }
        let path = match unsafe { CStr::from_ptr(path) }.to_str() {
            Ok(s) => s,
            Err(_) => return fail(ADVREG_ERR_INVALID_ARGUMENT, "path is not valid UTF-8"),
        };
        let label = match unsafe { CStr::from_ptr(label_column) }.to_str() {
            Ok(s) => s,
            Err(_) => return fail(ADVREG_ERR_INVALID_ARGUMENT, "label column is not valid UTF-8"),
        };
        match load_dataset(Path::new(path), label) {
            Ok(inner) => {
                unsafe { *out = Box::into_raw(Box::new(AdvregDataset { inner })) };
                ADVREG_OK
            }
            Err(e) => fail(ADVREG_ERR_DATA, &e.to_string()),
        }
    })
}

/// Builds a dataset from a row-major `n_rows x n_features` array and a label
/// vector of length `n_rows`.
///
/// # Safety
/// `rows` must point to `n_rows * n_features` doubles, `labels` to `n_rows`
/// doubles, and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn advreg_dataset_from_arrays(
    rows: *const c_double,
    n_rows: usize,
    n_features: usize,
    labels: *const c_double,
    out: *mut *mut AdvregDataset,
) -> c_int {
    guard(|| {
        if rows.is_null() || labels.is_null() || out.is_null() {
            return fail(ADVREG_ERR_NULL_POINTER, "null pointer argument");
        }
        if n_rows == 0 || n_features == 0 {
            return fail(ADVREG_ERR_INVALID_ARGUMENT, "empty dataset");
        }
        let row_slice = unsafe { std::slice::from_raw_parts(rows, n_rows * n_features) };
        let label_slice = unsafe { std::slice::from_raw_parts(labels, n_rows) };
        let matrix = DMatrix::from_row_slice(n_rows, n_features, row_slice);
        let labels = DVector::from_column_slice(label_slice);
        match Dataset::new(matrix, labels) {
            Ok(inner) => {
                unsafe { *out = Box::into_raw(Box::new(AdvregDataset { inner })) };
                ADVREG_OK
            }
            Err(e) => fail(ADVREG_ERR_DATA, &e.to_string()),
        }
    })
}

/// Frees a dataset handle.
///
/// # Safety
/// `dataset` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn advreg_dataset_free(dataset: *mut AdvregDataset) {
    if !dataset.is_null() {
        drop(unsafe { Box::from_raw(dataset) });
    }
}

/// Number of rows; zero for a null handle.
///
/// # Safety
/// `dataset` must be a valid handle or null.
#[no_mangle]
pub unsafe extern "C" fn advreg_dataset_rows(dataset: *const AdvregDataset) -> usize {
    if dataset.is_null() {
        0
    } else {
        unsafe { &*dataset }.inner.n_rows()
    }
}

/// Number of feature columns; zero for a null handle.
///
/// # Safety
/// `dataset` must be a valid handle or null.
#[no_mangle]
pub unsafe extern "C" fn advreg_dataset_features(dataset: *const AdvregDataset) -> usize {
    if dataset.is_null() {
        0
    } else {
        unsafe { &*dataset }.inner.n_features()
    }
}

/// Fits plain ridge regression. `ridge <= 0` disables the ridge term.
///
/// # Safety
/// `dataset` must be a valid handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn advreg_fit_linreg(
    dataset: *const AdvregDataset,
    ridge: c_double,
    out: *mut *mut AdvregModel,
) -> c_int {
    guard(|| {
        if dataset.is_null() || out.is_null() {
            return fail(ADVREG_ERR_NULL_POINTER, "null pointer argument");
        }
        let data = &unsafe { &*dataset }.inner;
        let ridge = (ridge > 0.0).then_some(ridge);
        match fit_linreg(data, ridge) {
            Ok(weights) => {
                let model = AdvregModel { weights, status: 0, residual_norm: 0.0 };
                unsafe { *out = Box::into_raw(Box::new(model)) };
                ADVREG_OK
            }
            Err(e) => fail(ADVREG_ERR_SOLVER, &e.to_string()),
        }
    })
}

/// Trains the bilevel model: `m` seeded rows become the adversary block with
/// targets shifted by `nu`, `delta` is the cosine floor, `ridge <= 0`
/// disables the ridge term. The solve status is available afterwards through
/// [`advreg_model_status`].
///
/// # Safety
/// `train` must be a valid handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn advreg_fit_bilevel(
    train: *const AdvregDataset,
    m: usize,
    delta: c_double,
    nu: c_double,
    ridge: c_double,
    seed: u64,
    out: *mut *mut AdvregModel,
) -> c_int {
    guard(|| {
        if train.is_null() || out.is_null() {
            return fail(ADVREG_ERR_NULL_POINTER, "null pointer argument");
        }
        let data = &unsafe { &*train }.inner;
        let body = || -> advreg::Result<AdvregModel> {
            let (static_data, adversary) = make_training_split(data, m, nu, seed)?;
            let config = ModelConfig { delta, ridge: (ridge > 0.0).then_some(ridge), nu };
            let problem = BilevelProblem::new(static_data, adversary, config)?;
            let start = default_start(&problem)?;
            let outcome = solve(&problem, &start, &SolverConfig::default())?;
            Ok(AdvregModel {
                weights: Weights(outcome.point.weights()),
                status: match outcome.status {
                    SolveStatus::Converged => 0,
                    SolveStatus::Stalled => 1,
                    SolveStatus::MaxIterations => 2,
                },
                residual_norm: outcome.residual_norm,
            })
        };
        match body() {
            Ok(model) => {
                unsafe { *out = Box::into_raw(Box::new(model)) };
                ADVREG_OK
            }
            Err(e) => fail(ADVREG_ERR_SOLVER, &e.to_string()),
        }
    })
}

/// Frees a model handle.
///
/// # Safety
/// `model` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn advreg_model_free(model: *mut AdvregModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Solve status: 0 converged, 1 stalled, 2 iteration limit, -1 null handle.
///
/// # Safety
/// `model` must be a valid handle or null.
#[no_mangle]
pub unsafe extern "C" fn advreg_model_status(model: *const AdvregModel) -> c_int {
    if model.is_null() {
        -1
    } else {
        unsafe { &*model }.status
    }
}

/// Final residual norm of the stationarity system (0 for baselines).
///
/// # Safety
/// `model` must be a valid handle or null.
#[no_mangle]
pub unsafe extern "C" fn advreg_model_residual_norm(model: *const AdvregModel) -> c_double {
    if model.is_null() {
        f64::NAN
    } else {
        unsafe { &*model }.residual_norm
    }
}

/// Number of weights; zero for a null handle.
///
/// # Safety
/// `model` must be a valid handle or null.
#[no_mangle]
pub unsafe extern "C" fn advreg_model_n_weights(model: *const AdvregModel) -> usize {
    if model.is_null() {
        0
    } else {
        unsafe { &*model }.weights.len()
    }
}

/// Copies the weight vector into `out`, which must hold `len` doubles with
/// `len >= advreg_model_n_weights(model)`.
///
/// # Safety
/// `model` must be a valid handle; `out` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn advreg_model_weights(
    model: *const AdvregModel,
    out: *mut c_double,
    len: usize,
) -> c_int {
    guard(|| {
        if model.is_null() || out.is_null() {
            return fail(ADVREG_ERR_NULL_POINTER, "null pointer argument");
        }
        let weights = &unsafe { &*model }.weights.0;
        if len < weights.len() {
            return fail(ADVREG_ERR_INVALID_ARGUMENT, "output buffer too small");
        }
        let slice = unsafe { std::slice::from_raw_parts_mut(out, weights.len()) };
        slice.copy_from_slice(weights.as_slice());
        ADVREG_OK
    })
}

/// Prediction for one feature row of length `n_features`.
///
/// # Safety
/// `model` must be a valid handle; `x` must point to `n_features` doubles;
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn advreg_predict(
    model: *const AdvregModel,
    x: *const c_double,
    n_features: usize,
    out: *mut c_double,
) -> c_int {
    guard(|| {
        if model.is_null() || x.is_null() || out.is_null() {
            return fail(ADVREG_ERR_NULL_POINTER, "null pointer argument");
        }
        let weights = &unsafe { &*model }.weights;
        if n_features != weights.len() {
            return fail(ADVREG_ERR_INVALID_ARGUMENT, "feature length mismatch");
        }
        let slice = unsafe { std::slice::from_raw_parts(x, n_features) };
        let value = weights.0.dot(&DVector::from_column_slice(slice));
        unsafe { *out = value };
        ADVREG_OK
    })
}

/// Mean squared error of the model over a dataset.
///
/// # Safety
/// Both handles must be valid; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn advreg_mse(
    model: *const AdvregModel,
    dataset: *const AdvregDataset,
    out: *mut c_double,
) -> c_int {
    guard(|| {
        if model.is_null() || dataset.is_null() || out.is_null() {
            return fail(ADVREG_ERR_NULL_POINTER, "null pointer argument");
        }
        let weights = &unsafe { &*model }.weights;
        let data = &unsafe { &*dataset }.inner;
        match evaluate_mse(weights, data) {
            Ok(mse) => {
                unsafe { *out = mse };
                ADVREG_OK
            }
            Err(e) => fail(ADVREG_ERR_DATA, &e.to_string()),
        }
    })
}

/// Crafts an evasion attack on a single feature row: moves `x0` (length `q`)
/// to push the model's prediction toward `target` while keeping cosine
/// similarity at least `delta`. Writes the attacked row into `out` (length
/// `q`).
///
/// # Safety
/// `model` must be a valid handle; `x0` and `out` must point to `q` doubles.
#[no_mangle]
pub unsafe extern "C" fn advreg_attack_instance(
    model: *const AdvregModel,
    x0: *const c_double,
    q: usize,
    target: c_double,
    delta: c_double,
    out: *mut c_double,
) -> c_int {
    guard(|| {
        if model.is_null() || x0.is_null() || out.is_null() {
            return fail(ADVREG_ERR_NULL_POINTER, "null pointer argument");
        }
        let weights = &unsafe { &*model }.weights;
        if q != weights.len() {
            return fail(ADVREG_ERR_INVALID_ARGUMENT, "feature length mismatch");
        }
        let origin = DVector::from_column_slice(unsafe { std::slice::from_raw_parts(x0, q) });
        match attack_instance(weights, &origin, target, delta) {
            Ok(attacked) => {
                let slice = unsafe { std::slice::from_raw_parts_mut(out, q) };
                slice.copy_from_slice(attacked.as_slice());
                ADVREG_OK
            }
            Err(e) => fail(ADVREG_ERR_DATA, &e.to_string()),
        }
    })
}

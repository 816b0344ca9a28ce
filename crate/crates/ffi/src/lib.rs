//! C interface to `narx-core`.
//!
//! Every fallible call returns a [`NarxStatus`]. On failure the message is
//! kept per thread and read back with [`narx_last_error_message`]. Models are
//! opaque [`NarxModel`] handles released with [`narx_model_free`]; strings
//! returned by the library are released with [`narx_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use narx_core::dataset::TimeSeries;
use narx_core::dynamics;
use narx_core::estimators::{self, ConstraintSet};
use narx_core::pipeline::{self, FailureKind, PipelineConfig, SelectionConfig, StopRule};
use narx_core::selection::SelectionMethod;
use narx_core::structure::{generate_candidates, CandidateOptions, MetaParams, ModelStructure, PolynomialModel};
use narx_core::validation;
use narx_core::NarxError;

/// Status codes. 2..=4 match the `narx` command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NarxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Numerical = 3,
    Validation = 4,
    Panic = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NarxMethod {
    Err = 0,
    Srr = 1,
    Ssmr = 2,
}

/// Summary of a validation run.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NarxValidation {
    pub rmse: f64,
    pub mse: f64,
    pub ms1pe: f64,
    pub msse: f64,
    /// Infinite when the free run diverges.
    pub j_corr: f64,
    /// Number of residual tests that passed, out of `tests_total`.
    pub tests_passed: u32,
    pub tests_total: u32,
}

/// Opaque model handle.
pub struct NarxModel {
    model: PolynomialModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Fail(NarxStatus, String);

impl From<NarxError> for Fail {
    fn from(e: NarxError) -> Self {
        let status = match FailureKind::from(&e) {
            FailureKind::Config => NarxStatus::InvalidInput,
            FailureKind::Numerical => NarxStatus::Numerical,
            FailureKind::Validation => NarxStatus::Validation,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(NarxStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(NarxStatus::InvalidInput, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> NarxStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NarxStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            NarxStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn series(u: *const f64, y: *const f64, n: usize) -> Result<TimeSeries, Fail> {
    let u = slice_arg(u, n, "u")?;
    let y = slice_arg(y, n, "y")?;
    Ok(TimeSeries::new("ffi", u.to_vec(), y.to_vec())?)
}

unsafe fn put_model(out: *mut *mut NarxModel, model: PolynomialModel) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(NarxModel { model }));
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = CString::new(s).map_err(|_| invalid("string contains NUL"))?.into_raw();
    Ok(())
}

unsafe fn model_ref<'a>(m: *const NarxModel) -> Result<&'a PolynomialModel, Fail> {
    m.as_ref().map(|h| &h.model).ok_or_else(|| null("model"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn narx_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn narx_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by the library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn narx_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn narx_model_free(model: *mut NarxModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Parses a model from its JSON form.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn narx_model_from_json(json: *const c_char, out: *mut *mut NarxModel) -> NarxStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        put_model(out, PolynomialModel::from_json(text)?)
    })
}

/// Serializes a model; free the result with `narx_string_free`.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn narx_model_to_json(model: *const NarxModel, out: *mut *mut c_char) -> NarxStatus {
    guard(|| {
        let m = model_ref(model)?;
        put_string(out, m.to_json()?)
    })
}

/// Number of terms, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn narx_model_n_terms(model: *const NarxModel) -> usize {
    model.as_ref().map_or(0, |h| h.model.regressors().len())
}

/// Copies up to `cap` parameters into `theta`; returns the parameter count.
///
/// # Safety
/// `theta` must hold `cap` doubles (may be NULL when `cap` is 0).
#[no_mangle]
pub unsafe extern "C" fn narx_model_parameters(model: *const NarxModel, theta: *mut f64, cap: usize) -> usize {
    let Some(h) = model.as_ref() else { return 0 };
    let t = h.model.theta();
    if !theta.is_null() {
        ptr::copy_nonoverlapping(t.as_ptr(), theta, t.len().min(cap));
    }
    t.len()
}

/// Free-run simulation. `y_out` receives `n` samples; on divergence the
/// status is `Numerical` and samples from the divergence point on are NaN.
///
/// # Safety
/// `u` and `y_out` must hold `n` doubles, `init` must hold `n_init`.
#[no_mangle]
pub unsafe extern "C" fn narx_model_simulate(
    model: *const NarxModel,
    u: *const f64,
    n: usize,
    init: *const f64,
    n_init: usize,
    y_out: *mut f64,
) -> NarxStatus {
    guard(|| {
        let m = model_ref(model)?;
        let u = slice_arg(u, n, "u")?;
        let init = slice_arg(init, n_init, "init")?;
        if y_out.is_null() && n > 0 {
            return Err(null("y_out"));
        }
        let run = dynamics::simulate_free_run(m, u, init)?;
        let out = if n == 0 { &mut [][..] } else { slice::from_raw_parts_mut(y_out, n) };
        out.fill(f64::NAN);
        out[..run.y.len()].copy_from_slice(&run.y);
        match run.diverged_at {
            Some(k) => Err(Fail(NarxStatus::Numerical, format!("free run diverged at sample {k}"))),
            None => Ok(()),
        }
    })
}

/// Least-squares fit of a structure (JSON) to data. With `constraints_json`
/// non-NULL the fit is constrained least squares.
///
/// # Safety
/// Strings must be NUL-terminated; `u` and `y` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn narx_fit(
    structure_json: *const c_char,
    u: *const f64,
    y: *const f64,
    n: usize,
    constraints_json: *const c_char,
    out: *mut *mut NarxModel,
) -> NarxStatus {
    guard(|| {
        let structure: ModelStructure = serde_json::from_str(str_arg(structure_json, "structure_json")?)
            .map_err(|e| invalid(format!("structure: {e}")))?;
        let ts = series(u, y, n)?;
        let prob = estimators::build_regression(&ts, &structure, None)?;
        let theta = if constraints_json.is_null() {
            estimators::least_squares(&prob)?
        } else {
            let cons = ConstraintSet::from_json(str_arg(constraints_json, "constraints_json")?, structure.len())?;
            estimators::constrained_least_squares(&prob, &cons)?
        };
        put_model(out, PolynomialModel::new(structure, theta)?)
    })
}

/// Forward structure selection with AIC stopping, followed by a
/// least-squares fit of the selected terms.
///
/// # Safety
/// `meta` must be NUL-terminated (e.g. "ny=2,nu=2,l=2,d=1"); `u` and `y`
/// must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn narx_select(
    method: NarxMethod,
    meta: *const c_char,
    n_max: usize,
    constant: bool,
    u: *const f64,
    y: *const f64,
    n: usize,
    out: *mut *mut NarxModel,
) -> NarxStatus {
    guard(|| {
        let meta = MetaParams::parse(str_arg(meta, "meta")?)?;
        let ts = series(u, y, n)?;
        let pool = generate_candidates(
            &meta,
            CandidateOptions {
                constant,
                ..CandidateOptions::default()
            },
        );
        let cfg = SelectionConfig {
            method: match method {
                NarxMethod::Err => SelectionMethod::Err,
                NarxMethod::Srr => SelectionMethod::Srr,
                NarxMethod::Ssmr => SelectionMethod::Ssmr,
            },
            n_max,
            stop: StopRule::Aic,
            kernel_sigma: None,
        };
        let trace = pipeline::run_selection(&ts, &pool, &cfg)?;
        let structure = ModelStructure::new(meta, trace.regressors(trace.stop_index))?;
        let theta = estimators::least_squares(&estimators::build_regression(&ts, &structure, None)?)?;
        put_model(out, PolynomialModel::new(structure, theta)?)
    })
}

/// Free-run metrics and residual tests of `model` on data.
///
/// # Safety
/// `u` and `y` must hold `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn narx_validate(
    model: *const NarxModel,
    u: *const f64,
    y: *const f64,
    n: usize,
    tau_max: usize,
    out: *mut NarxValidation,
) -> NarxStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let r = validation::validate(m, &series(u, y, n)?, tau_max)?;
        *out = NarxValidation {
            rmse: r.rmse,
            mse: r.mse,
            ms1pe: r.ms1pe,
            msse: r.msse,
            j_corr: r.j_corr,
            tests_passed: r.residual_tests.iter().filter(|t| t.pass).count() as u32,
            tests_total: r.residual_tests.len() as u32,
        };
        Ok(())
    })
}

/// Runs the pipeline from a JSON configuration. On success `manifest_out`
/// (if non-NULL) receives the manifest JSON.
///
/// # Safety
/// `config_json` must be NUL-terminated; `manifest_out` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn narx_pipeline_run(config_json: *const c_char, manifest_out: *mut *mut c_char) -> NarxStatus {
    guard(|| {
        let cfg = PipelineConfig::from_json(str_arg(config_json, "config_json")?).map_err(|e| invalid(e.to_string()))?;
        let run = pipeline::run_pipeline(&cfg).map_err(|e| {
            let status = match e.kind {
                FailureKind::Config => NarxStatus::InvalidInput,
                FailureKind::Numerical => NarxStatus::Numerical,
                FailureKind::Validation => NarxStatus::Validation,
            };
            Fail(status, e.to_string())
        })?;
        if !manifest_out.is_null() {
            let text = serde_json::to_string_pretty(&run.manifest).map_err(|e| invalid(e.to_string()))?;
            put_string(manifest_out, text)?;
        }
        Ok(())
    })
}

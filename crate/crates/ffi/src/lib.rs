//! C ABI over the `comcure` library.
//!
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `*_free` function. Every fallible call returns a
//! [`ComcureStatus`]; on failure the message is available from
//! [`comcure_last_error`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use comcure::cli::{self, FitReport, InitStrategy, Manifest, ManifestFit, Provenance};
use comcure::{CureError, Subject};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComcureStatus {
    Ok = 0,
    NullArgument = 1,
    /// Malformed input: dataset, manifest, covariates or ν-grid.
    Invalid = 2,
    /// Parameters left the model's numerical domain.
    Numeric = 3,
    /// EM stopped at its iteration cap; the fit handle is still returned.
    NotConverged = 4,
    Io = 5,
    /// A caller buffer is shorter than the value count.
    BufferTooSmall = 6,
    /// Standard errors were not computed or the information matrix was singular.
    Unavailable = 7,
    Panic = 8,
}

pub struct ComcureDataset {
    subjects: Vec<Subject>,
}

pub struct ComcureFit {
    report: FitReport,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("interior NULs removed"));
}

fn fail(status: ComcureStatus, msg: impl Into<String>) -> ComcureStatus {
    set_error(msg);
    status
}

fn from_error(e: &CureError) -> ComcureStatus {
    let status = match e {
        CureError::Io(_) => ComcureStatus::Io,
        e if e.is_numeric() => ComcureStatus::Numeric,
        _ => ComcureStatus::Invalid,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> ComcureStatus) -> ComcureStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(ComcureStatus::Panic, "internal panic"),
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, ComcureStatus> {
    if p.is_null() {
        return Err(fail(ComcureStatus::NullArgument, format!("{what} is NULL")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(ComcureStatus::Invalid, format!("{what} is not UTF-8")))
}

/// Message of the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn comcure_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Parses dataset text (the CLI's delimited format).
///
/// # Safety
/// `csv` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn comcure_dataset_from_csv(csv: *const c_char, out: *mut *mut ComcureDataset) -> ComcureStatus {
    guard(|| {
        if out.is_null() {
            return fail(ComcureStatus::NullArgument, "out is NULL");
        }
        let csv = match text(csv, "csv") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match cli::parse_dataset(csv) {
            Ok(subjects) if subjects.is_empty() => fail(ComcureStatus::Invalid, "dataset has no rows"),
            Ok(subjects) => {
                *out = Box::into_raw(Box::new(ComcureDataset { subjects }));
                ComcureStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// Reads and parses a dataset file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn comcure_dataset_load(path: *const c_char, out: *mut *mut ComcureDataset) -> ComcureStatus {
    guard(|| {
        let path = match text(path, "path") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match std::fs::read_to_string(path) {
            Ok(content) => match CString::new(content) {
                Ok(c) => comcure_dataset_from_csv(c.as_ptr(), out),
                Err(_) => fail(ComcureStatus::Invalid, "dataset contains a NUL byte"),
            },
            Err(e) => fail(ComcureStatus::Io, format!("{path}: {e}")),
        }
    })
}

/// Number of subjects, or 0 for NULL.
///
/// # Safety
/// `data` must be NULL or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn comcure_dataset_len(data: *const ComcureDataset) -> usize {
    data.as_ref().map_or(0, |d| d.subjects.len())
}

/// # Safety
/// `data` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn comcure_dataset_free(data: *mut ComcureDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

unsafe fn run_fit(
    data: *const ComcureDataset,
    manifest_toml: *const c_char,
    nu_grid: Option<*const c_char>,
    out: *mut *mut ComcureFit,
) -> ComcureStatus {
    if out.is_null() {
        return fail(ComcureStatus::NullArgument, "out is NULL");
    }
    let Some(data) = data.as_ref() else {
        return fail(ComcureStatus::NullArgument, "dataset is NULL");
    };
    let manifest_text = match text(manifest_toml, "manifest") {
        Ok(t) => t,
        Err(s) => return s,
    };
    let manifest: Manifest = match cli::parse_manifest(manifest_text) {
        Ok(m) => m,
        Err(e) => return from_error(&e),
    };
    let grid = match nu_grid {
        Some(p) if !p.is_null() => match text(p, "nu_grid").map(cli::parse_nu_grid) {
            Ok(Ok(g)) => Some(g),
            Ok(Err(e)) => return from_error(&e),
            Err(s) => return s,
        },
        Some(_) => match manifest.model.as_ref().and_then(|m| m.nu_grid.clone()) {
            Some(g) => Some(g),
            None => return fail(ComcureStatus::Invalid, "no ν-grid given and none in the manifest"),
        },
        None => None,
    };
    let seed = manifest.seed.unwrap_or(0);
    let strategy: InitStrategy = manifest.init.strategy;
    match cli::fit_with_manifest(&data.subjects, &manifest, grid.as_deref(), strategy, seed) {
        Ok(ManifestFit { model, start, result }) => {
            let converged = result.converged;
            let iterations = result.iterations;
            let report = FitReport {
                provenance: Provenance {
                    command: if grid.is_some() { "profile" } else { "fit" }.into(),
                    manifest_sha256: Some(cli::sha256_hex(manifest_text.as_bytes())),
                    data_sha256: None,
                    seed: Some(seed),
                },
                init_strategy: strategy,
                start,
                model,
                fit: result,
            };
            *out = Box::into_raw(Box::new(ComcureFit { report }));
            if converged {
                ComcureStatus::Ok
            } else {
                fail(ComcureStatus::NotConverged, format!("EM stopped after {iterations} iterations"))
            }
        }
        Err(e) => from_error(&e),
    }
}

/// Fits `model.family` from a TOML manifest. On `NotConverged` the handle is
/// still written to `out`.
///
/// # Safety
/// `data` must be a live dataset handle, `manifest_toml` a NUL-terminated
/// string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn comcure_fit(
    data: *const ComcureDataset,
    manifest_toml: *const c_char,
    out: *mut *mut ComcureFit,
) -> ComcureStatus {
    guard(|| run_fit(data, manifest_toml, None, out))
}

/// Profiles over `nu_grid` (`"0, 0.5, 1:2:0.25, inf"` style), or over the
/// manifest's `model.nu_grid` when `nu_grid` is NULL.
///
/// # Safety
/// As [`comcure_fit`]; `nu_grid` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn comcure_profile(
    data: *const ComcureDataset,
    manifest_toml: *const c_char,
    nu_grid: *const c_char,
    out: *mut *mut ComcureFit,
) -> ComcureStatus {
    guard(|| run_fit(data, manifest_toml, Some(nu_grid), out))
}

unsafe fn with_fit(fit: *const ComcureFit, f: impl FnOnce(&FitReport) -> ComcureStatus) -> ComcureStatus {
    guard(|| match fit.as_ref() {
        Some(h) => f(&h.report),
        None => fail(ComcureStatus::NullArgument, "fit is NULL"),
    })
}

unsafe fn write_scalar(out: *mut f64, v: f64) -> ComcureStatus {
    if out.is_null() {
        return fail(ComcureStatus::NullArgument, "output pointer is NULL");
    }
    *out = v;
    ComcureStatus::Ok
}

/// # Safety
/// `fit` must be a live fit handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn comcure_fit_loglik(fit: *const ComcureFit, out: *mut f64) -> ComcureStatus {
    with_fit(fit, |r| write_scalar(out, r.fit.loglik))
}

/// # Safety
/// `fit` must be a live fit handle; `aic` and `bic` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn comcure_fit_aic_bic(fit: *const ComcureFit, aic: *mut f64, bic: *mut f64) -> ComcureStatus {
    with_fit(fit, |r| match write_scalar(aic, r.fit.aic) {
        ComcureStatus::Ok => write_scalar(bic, r.fit.bic),
        s => s,
    })
}

/// Selected ν; `+inf` for the Bernoulli limit.
///
/// # Safety
/// `fit` must be a live fit handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn comcure_fit_nu(fit: *const ComcureFit, out: *mut f64) -> ComcureStatus {
    with_fit(fit, |r| write_scalar(out, r.fit.nu.sort_key()))
}

/// 1 if EM met its tolerance, 0 otherwise.
///
/// # Safety
/// `fit` must be a live fit handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn comcure_fit_converged(fit: *const ComcureFit, out: *mut i32) -> ComcureStatus {
    with_fit(fit, |r| {
        if out.is_null() {
            return fail(ComcureStatus::NullArgument, "output pointer is NULL");
        }
        *out = i32::from(r.fit.converged);
        ComcureStatus::Ok
    })
}

/// Number of estimated parameters `(β…, γ1, γ2)`, or 0 for NULL.
///
/// # Safety
/// `fit` must be NULL or a live fit handle.
#[no_mangle]
pub unsafe extern "C" fn comcure_fit_param_count(fit: *const ComcureFit) -> usize {
    fit.as_ref().map_or(0, |h| h.report.fit.params.len())
}

unsafe fn copy_out(values: &[f64], buf: *mut f64, len: usize) -> ComcureStatus {
    if buf.is_null() {
        return fail(ComcureStatus::NullArgument, "buffer is NULL");
    }
    if len < values.len() {
        return fail(ComcureStatus::BufferTooSmall, format!("buffer holds {len} values, {} needed", values.len()));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), buf, values.len());
    ComcureStatus::Ok
}

/// Copies the estimates `(β…, γ1, γ2)` into `buf`.
///
/// # Safety
/// `fit` must be a live fit handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn comcure_fit_params(fit: *const ComcureFit, buf: *mut f64, len: usize) -> ComcureStatus {
    with_fit(fit, |r| copy_out(&r.fit.params.to_vec(), buf, len))
}

/// Copies the standard errors in parameter order into `buf`.
///
/// # Safety
/// `fit` must be a live fit handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn comcure_fit_std_errors(fit: *const ComcureFit, buf: *mut f64, len: usize) -> ComcureStatus {
    with_fit(fit, |r| match &r.fit.se {
        Some(se) => copy_out(se, buf, len),
        None => fail(
            ComcureStatus::Unavailable,
            r.fit.diagnostics.se_failure.clone().unwrap_or_else(|| "standard errors were not computed".into()),
        ),
    })
}

/// The fit report as JSON, in the CLI's `fit.json` format. Release the
/// string with [`comcure_string_free`].
///
/// # Safety
/// `fit` must be a live fit handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn comcure_fit_to_json(fit: *const ComcureFit, out: *mut *mut c_char) -> ComcureStatus {
    with_fit(fit, |r| {
        if out.is_null() {
            return fail(ComcureStatus::NullArgument, "out is NULL");
        }
        match serde_json::to_string(r) {
            Ok(s) => match CString::new(s) {
                Ok(c) => {
                    *out = c.into_raw();
                    ComcureStatus::Ok
                }
                Err(_) => fail(ComcureStatus::Invalid, "report contains a NUL byte"),
            },
            Err(e) => fail(ComcureStatus::Invalid, e.to_string()),
        }
    })
}

/// # Safety
/// `s` must be NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn comcure_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Population survival at `y` and cure probability for a covariate profile
/// (`"name=value,…"`) with `exposure_count` daily exposures.
///
/// # Safety
/// `fit` must be a live fit handle, `covariates` a NUL-terminated string,
/// `s_pop` and `cure` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn comcure_predict(
    fit: *const ComcureFit,
    covariates: *const c_char,
    exposure_count: usize,
    y: f64,
    s_pop: *mut f64,
    cure: *mut f64,
) -> ComcureStatus {
    with_fit(fit, |r| {
        let cov = match text(covariates, "covariates").map(cli::parse_covariates) {
            Ok(Ok(c)) => c,
            Ok(Err(e)) => return from_error(&e),
            Err(s) => return s,
        };
        if !(y >= 0.0 && y.is_finite()) {
            return fail(ComcureStatus::Invalid, format!("y must be finite and ≥ 0, got {y}"));
        }
        let step = if y > 0.0 { y } else { 1.0 };
        match cli::predict(&r.model, &r.fit.params, &cov, exposure_count, Some(y), step) {
            Ok(p) => {
                let s = p.curve.last().map_or(1.0, |&(_, s)| s);
                match write_scalar(s_pop, s) {
                    ComcureStatus::Ok => write_scalar(cure, p.cure_probability),
                    st => st,
                }
            }
            Err(e) => from_error(&e),
        }
    })
}

/// # Safety
/// `fit` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn comcure_fit_free(fit: *mut ComcureFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

//! C ABI over the cudrisk risk engine.
//!
//! Models are opaque handles from [`cudrisk_model_load`], released with
//! [`cudrisk_model_free`]. Every call returns a [`CudriskStatus`]; on failure
//! the message is available from [`cudrisk_last_error`] on the same thread.
//! Covariate values are passed in the order reported by
//! [`cudrisk_model_covariate_name`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cudrisk::artifact::{ModelArtifact, Predictor};
use cudrisk::hazard::CovariateProfile;
use cudrisk::risk::{Anchor, RiskEstimate, RiskQuery};
use cudrisk::validation::recalibrate;
use cudrisk::Error;

/// Loaded model.
pub struct CudriskModel {
    predictor: Predictor,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CudriskStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    OutOfRange = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CudriskAnchor {
    AtFirstUse = 0,
    AtAge = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CudriskRisk {
    pub mean: f64,
    pub cri_low: f64,
    pub cri_high: f64,
    pub draws: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> CudriskStatus {
    match e {
        Error::Io { .. } => CudriskStatus::Io,
        Error::Format(_) | Error::Schema(_) => CudriskStatus::Format,
        Error::Domain { .. } | Error::Range { .. } => CudriskStatus::OutOfRange,
        Error::Argument(_) | Error::Value(_) | Error::State(_) => CudriskStatus::InvalidArgument,
        _ => CudriskStatus::Numeric,
    }
}

fn fail(status: CudriskStatus, msg: impl Into<String>) -> CudriskStatus {
    set_error(msg);
    status
}

/// Runs `f`, recording errors and converting panics.
fn guard(f: impl FnOnce() -> Result<(), (CudriskStatus, String)>) -> CudriskStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CudriskStatus::Ok
        }
        Ok(Err((s, m))) => fail(s, m),
        Err(_) => fail(CudriskStatus::Panic, "internal panic"),
    }
}

fn lib_err(e: Error) -> (CudriskStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (CudriskStatus, String) {
    (CudriskStatus::NullPointer, format!("{what} is null"))
}

unsafe fn model_ref<'a>(m: *const CudriskModel) -> Result<&'a CudriskModel, (CudriskStatus, String)> {
    m.as_ref().ok_or_else(|| null("model"))
}

/// Copies `s` plus a NUL into `buf` when it fits; returns the needed size.
unsafe fn copy_str(s: &str, buf: *mut c_char, len: usize) -> usize {
    let needed = s.len() + 1;
    if !buf.is_null() && len >= needed {
        ptr::copy_nonoverlapping(s.as_ptr().cast::<c_char>(), buf, s.len());
        *buf.add(s.len()) = 0;
    }
    needed
}

/// Loads a model artifact from `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cudrisk_model_load(path: *const c_char, out: *mut *mut CudriskModel) -> CudriskStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (CudriskStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let artifact = ModelArtifact::load(path).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(CudriskModel { predictor: Predictor::new(artifact) }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`cudrisk_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn cudrisk_model_free(model: *mut CudriskModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cudrisk_model_covariate_count(model: *const CudriskModel, out: *mut usize) -> CudriskStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.predictor.artifact.header.covariates.len();
        Ok(())
    })
}

/// Writes covariate `index`'s name into `buf`. `needed` receives the buffer
/// size required including the terminating NUL.
///
/// # Safety
/// `model` must be live; `buf` must hold `len` bytes or be null; `needed`
/// may be null.
#[no_mangle]
pub unsafe extern "C" fn cudrisk_model_covariate_name(
    model: *const CudriskModel,
    index: usize,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> CudriskStatus {
    guard(|| {
        let m = model_ref(model)?;
        let names = &m.predictor.artifact.header.covariates;
        let name = names.get(index).ok_or_else(|| {
            (CudriskStatus::InvalidArgument, format!("covariate index {index} out of {}", names.len()))
        })?;
        let n = copy_str(name, buf, len);
        if !needed.is_null() {
            *needed = n;
        }
        if len < n {
            return Err((CudriskStatus::BufferTooSmall, format!("name needs {n} bytes")));
        }
        Ok(())
    })
}

/// Allowed age range for `a` and `b`.
///
/// # Safety
/// `model` must be live; `low` and `high` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn cudrisk_model_age_range(
    model: *const CudriskModel,
    low: *mut f64,
    high: *mut f64,
) -> CudriskStatus {
    guard(|| {
        let m = model_ref(model)?;
        if low.is_null() || high.is_null() {
            return Err(null("output"));
        }
        (*low, *high) = m.predictor.artifact.age_range();
        Ok(())
    })
}

unsafe fn estimate(
    m: &CudriskModel,
    values: *const f64,
    n_values: usize,
    anchor: CudriskAnchor,
    a: f64,
    b: f64,
) -> Result<RiskEstimate, (CudriskStatus, String)> {
    let names = &m.predictor.artifact.header.covariates;
    if n_values != names.len() {
        return Err((
            CudriskStatus::InvalidArgument,
            format!("expected {} covariate values, got {n_values}", names.len()),
        ));
    }
    if values.is_null() && n_values > 0 {
        return Err(null("values"));
    }
    let slice = if n_values == 0 { &[][..] } else { std::slice::from_raw_parts(values, n_values) };
    let mut profile = CovariateProfile::new();
    for (name, v) in names.iter().zip(slice) {
        profile.set(name, *v);
    }
    let anchor = match anchor {
        CudriskAnchor::AtFirstUse => Anchor::AtFirstUse,
        CudriskAnchor::AtAge => Anchor::AtAge,
    };
    m.predictor.predict(&RiskQuery::new(a, b, profile, anchor)).map_err(lib_err)
}

/// Posterior mean absolute risk over `(a, b]` with its 95% credible interval.
///
/// # Safety
/// `model` must be live, `values` must hold `n_values` doubles and `out`
/// must be valid.
#[no_mangle]
pub unsafe extern "C" fn cudrisk_predict(
    model: *const CudriskModel,
    values: *const f64,
    n_values: usize,
    anchor: CudriskAnchor,
    a: f64,
    b: f64,
    out: *mut CudriskRisk,
) -> CudriskStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let e = estimate(m, values, n_values, anchor, a, b)?;
        *out = CudriskRisk { mean: e.mean_risk, cri_low: e.cri_low, cri_high: e.cri_high, draws: e.draws };
        Ok(())
    })
}

/// Per-year cumulative risk curve. `written` receives the number of points;
/// when it exceeds `capacity` nothing is copied and `BufferTooSmall` is
/// returned.
///
/// # Safety
/// As [`cudrisk_predict`]; `ages` and `risks` must each hold `capacity`
/// doubles.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn cudrisk_predict_curve(
    model: *const CudriskModel,
    values: *const f64,
    n_values: usize,
    anchor: CudriskAnchor,
    a: f64,
    b: f64,
    ages: *mut f64,
    risks: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> CudriskStatus {
    guard(|| {
        let m = model_ref(model)?;
        if written.is_null() {
            return Err(null("written"));
        }
        let e = estimate(m, values, n_values, anchor, a, b)?;
        let n = e.per_year_curve.len();
        *written = n;
        if n > capacity {
            return Err((CudriskStatus::BufferTooSmall, format!("curve has {n} points")));
        }
        if n > 0 && (ages.is_null() || risks.is_null()) {
            return Err(null("curve buffer"));
        }
        for (i, (age, r)) in e.per_year_curve.iter().enumerate() {
            *ages.add(i) = *age;
            *risks.add(i) = *r;
        }
        Ok(())
    })
}

/// Intercept-only logistic recalibration. `updated` receives `n` risks.
///
/// # Safety
/// `risks`, `outcomes` and `updated` must each hold `n` elements;
/// `intercept` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cudrisk_recalibrate(
    risks: *const f64,
    outcomes: *const u8,
    n: usize,
    intercept: *mut f64,
    updated: *mut f64,
) -> CudriskStatus {
    guard(|| {
        if risks.is_null() || outcomes.is_null() || intercept.is_null() || updated.is_null() {
            return Err(null("argument"));
        }
        let r = std::slice::from_raw_parts(risks, n);
        let y: Vec<bool> = std::slice::from_raw_parts(outcomes, n).iter().map(|v| *v != 0).collect();
        let fit = recalibrate(r, &y).map_err(lib_err)?;
        *intercept = fit.intercept;
        ptr::copy_nonoverlapping(fit.risks.as_ptr(), updated, n);
        Ok(())
    })
}

/// Copies the calling thread's last error message into `buf` and returns the
/// size needed including the NUL. Empty after a successful call.
///
/// # Safety
/// `buf` must hold `len` bytes or be null.
#[no_mangle]
pub unsafe extern "C" fn cudrisk_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| copy_str(&e.borrow(), buf, len))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cudrisk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use cudrisk::artifact::{ModelArtifact, Predictor};
use cudrisk::hazard::CovariateProfile;
use cudrisk::risk::{Anchor, RiskQuery};
use cudrisk_ffi::*;

fn model_path() -> CString {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/reference_model.cudrisk");
    CString::new(p.to_str().unwrap()).unwrap()
}

fn load() -> *mut CudriskModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { cudrisk_model_load(model_path().as_ptr(), &mut m) }, CudriskStatus::Ok);
    assert!(!m.is_null());
    m
}

fn last_error() -> String {
    let n = unsafe { cudrisk_last_error(ptr::null_mut(), 0) };
    let mut buf = vec![0 as c_char; n];
    unsafe { cudrisk_last_error(buf.as_mut_ptr(), n) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

const VALUES: [f64; 5] = [1.0, 0.4, 0.6, 0.5, 0.3];

#[test]
fn covariate_names_in_order() {
    let m = load();
    let mut n = 0;
    assert_eq!(unsafe { cudrisk_model_covariate_count(m, &mut n) }, CudriskStatus::Ok);
    assert_eq!(n, 5);
    let mut names = Vec::new();
    for i in 0..n {
        let mut needed = 0;
        let s = unsafe { cudrisk_model_covariate_name(m, i, ptr::null_mut(), 0, &mut needed) };
        assert_eq!(s, CudriskStatus::BufferTooSmall);
        let mut buf = vec![0 as c_char; needed];
        let s = unsafe { cudrisk_model_covariate_name(m, i, buf.as_mut_ptr(), needed, &mut needed) };
        assert_eq!(s, CudriskStatus::Ok);
        names.push(unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_string());
    }
    assert_eq!(names, ["male", "conscientiousness", "neuroticism", "openness", "delinquency"]);
    assert_eq!(unsafe { cudrisk_model_covariate_name(m, 9, ptr::null_mut(), 0, ptr::null_mut()) }, CudriskStatus::InvalidArgument);
    unsafe { cudrisk_model_free(m) };
}

#[test]
fn predict_matches_library() {
    let m = load();
    let mut out = CudriskRisk::default();
    let s = unsafe { cudrisk_predict(m, VALUES.as_ptr(), 5, CudriskAnchor::AtFirstUse, 16.0, 31.0, &mut out) };
    assert_eq!(s, CudriskStatus::Ok);

    let pred = Predictor::new(ModelArtifact::load(model_path().to_str().unwrap()).unwrap());
    let mut profile = CovariateProfile::new();
    for (name, v) in pred.artifact.header.covariates.clone().iter().zip(VALUES) {
        profile.set(name, v);
    }
    let direct = pred.predict(&RiskQuery::new(16.0, 31.0, profile, Anchor::AtFirstUse)).unwrap();
    assert_eq!(out.mean, direct.mean_risk);
    assert_eq!((out.cri_low, out.cri_high, out.draws), (direct.cri_low, direct.cri_high, direct.draws));

    let mut written = 0;
    let s = unsafe {
        cudrisk_predict_curve(m, VALUES.as_ptr(), 5, CudriskAnchor::AtFirstUse, 16.0, 31.0, ptr::null_mut(), ptr::null_mut(), 0, &mut written)
    };
    assert_eq!(s, CudriskStatus::BufferTooSmall);
    assert_eq!(written, direct.per_year_curve.len());
    let (mut ages, mut risks) = (vec![0.0; written], vec![0.0; written]);
    let s = unsafe {
        cudrisk_predict_curve(m, VALUES.as_ptr(), 5, CudriskAnchor::AtFirstUse, 16.0, 31.0, ages.as_mut_ptr(), risks.as_mut_ptr(), written, &mut written)
    };
    assert_eq!(s, CudriskStatus::Ok);
    let expected: Vec<(f64, f64)> = ages.into_iter().zip(risks).collect();
    assert_eq!(expected, direct.per_year_curve);
    unsafe { cudrisk_model_free(m) };
}

#[test]
fn errors_are_codes_with_messages() {
    let m = load();
    let mut out = CudriskRisk::default();
    let s = unsafe { cudrisk_predict(m, VALUES.as_ptr(), 4, CudriskAnchor::AtAge, 16.0, 20.0, &mut out) };
    assert_eq!(s, CudriskStatus::InvalidArgument);
    assert!(last_error().contains("expected 5"), "{}", last_error());

    let s = unsafe { cudrisk_predict(m, VALUES.as_ptr(), 5, CudriskAnchor::AtAge, 16.0, 95.0, &mut out) };
    assert_eq!(s, CudriskStatus::OutOfRange);
    assert!(!last_error().is_empty());

    let s = unsafe { cudrisk_predict(m, VALUES.as_ptr(), 5, CudriskAnchor::AtAge, 16.0, 20.0, &mut out) };
    assert_eq!(s, CudriskStatus::Ok);
    assert_eq!(last_error(), "");

    assert_eq!(unsafe { cudrisk_predict(ptr::null(), VALUES.as_ptr(), 5, CudriskAnchor::AtAge, 16.0, 20.0, &mut out) }, CudriskStatus::NullPointer);
    unsafe { cudrisk_model_free(m) };
    unsafe { cudrisk_model_free(ptr::null_mut()) };

    let mut h = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.cudrisk").unwrap();
    assert_eq!(unsafe { cudrisk_model_load(missing.as_ptr(), &mut h) }, CudriskStatus::Io);
    assert!(h.is_null());
    assert_eq!(unsafe { cudrisk_model_load(ptr::null(), &mut h) }, CudriskStatus::NullPointer);
}

#[test]
fn age_range_and_version() {
    let m = load();
    let (mut lo, mut hi) = (0.0, 0.0);
    assert_eq!(unsafe { cudrisk_model_age_range(m, &mut lo, &mut hi) }, CudriskStatus::Ok);
    assert!(lo < hi);
    unsafe { cudrisk_model_free(m) };
    let v = unsafe { CStr::from_ptr(cudrisk_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn recalibration_over_abi() {
    let risks: Vec<f64> = (0..200).map(|i| 0.05 + 0.9 * (i as f64 / 199.0)).collect();
    let outcomes: Vec<u8> = (0..200).map(|i| u8::from(i % 4 == 0)).collect();
    let mut intercept = f64::NAN;
    let mut updated = vec![0.0; 200];
    let s = unsafe { cudrisk_recalibrate(risks.as_ptr(), outcomes.as_ptr(), 200, &mut intercept, updated.as_mut_ptr()) };
    assert_eq!(s, CudriskStatus::Ok);
    assert!(intercept < 0.0);
    let expected: f64 = updated.iter().sum();
    assert!((expected - 50.0).abs() < 1e-6);

    let none = vec![0u8; 200];
    let s = unsafe { cudrisk_recalibrate(risks.as_ptr(), none.as_ptr(), 200, &mut intercept, updated.as_mut_ptr()) };
    assert_ne!(s, CudriskStatus::Ok);
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/cudrisk.h")).unwrap();
    for f in [
        "cudrisk_model_load", "cudrisk_model_free", "cudrisk_model_covariate_count", "cudrisk_model_covariate_name",
        "cudrisk_model_age_range", "cudrisk_predict(", "cudrisk_predict_curve", "cudrisk_recalibrate",
        "cudrisk_last_error", "cudrisk_version", "typedef struct CudriskModel CudriskModel",
    ] {
        assert!(header.contains(f), "{f}");
    }
}

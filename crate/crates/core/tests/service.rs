use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use cudrisk::artifact::{ModelArtifact, Predictor};
use cudrisk::hazard::CovariateProfile;
use cudrisk::risk::{Anchor, RiskEstimate, RiskQuery};
use cudrisk::service::{router, AppState};
use http_body_util::BodyExt;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

fn predictor() -> Predictor {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/reference_model.cudrisk");
    Predictor::new(ModelArtifact::load(path).unwrap())
}

fn profile() -> Value {
    json!({"male": 1, "conscientiousness": 0.4, "neuroticism": 0.6, "openness": 0.5, "delinquency": 0.3})
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::test]
async fn unavailable_until_loaded() {
    let state = AppState::new();
    let app = router(state.clone());
    let body = json!({"profile": profile(), "anchor": "at_first_use", "a": 16, "b": 21});
    assert_eq!(call(&app, "POST", "/v1/predict", Some(body.clone())).await.0, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(call(&app, "GET", "/v1/model/meta", None).await.0, StatusCode::SERVICE_UNAVAILABLE);
    state.install(predictor());
    assert_eq!(call(&app, "POST", "/v1/predict", Some(body)).await.0, StatusCode::OK);
}

#[tokio::test]
async fn meta_lists_covariates_and_ranges() {
    let app = router(AppState::loaded(predictor()));
    let (status, meta) = call(&app, "GET", "/v1/model/meta", None).await;
    assert_eq!(status, StatusCode::OK);
    let names: Vec<&str> = meta["covariates"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["male", "conscientiousness", "neuroticism", "openness", "delinquency"]);
    assert_eq!(meta["covariates"][0]["binary"], json!(true));
    assert_eq!(meta["n_draws"], json!(500));
    assert!(meta["age_range"][0].as_f64().unwrap() < meta["age_range"][1].as_f64().unwrap());
    assert!(meta["diagnostics"]["converged"].is_boolean());
}

#[tokio::test]
async fn predict_matches_library_exactly() {
    let pred = predictor();
    let app = router(AppState::loaded(pred.clone()));
    let body = json!({"profile": profile(), "anchor": "at_first_use", "a": 16, "b": 31});
    let (status, v) = call(&app, "POST", "/v1/predict", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    let got: RiskEstimate = serde_json::from_value(v).unwrap();
    let p: CovariateProfile = serde_json::from_value(profile()).unwrap();
    let mut q = RiskQuery::new(16.0, 31.0, p, Anchor::AtFirstUse);
    q.first_use_age = None;
    let direct = pred.predict(&q).unwrap();
    assert_eq!(got, direct);
}

#[tokio::test]
async fn equal_ages_give_zero_risk() {
    let app = router(AppState::loaded(predictor()));
    let body = json!({"profile": profile(), "anchor": "at_age", "a": 20, "b": 20});
    let (_, v) = call(&app, "POST", "/v1/predict", Some(body)).await;
    assert_eq!(v["mean_risk"], json!(0.0));
}

#[tokio::test]
async fn whatif_without_deltas_equals_predict() {
    let app = router(AppState::loaded(predictor()));
    let base = json!({"profile": profile(), "anchor": "at_first_use", "a": 16, "b": 21});
    let (_, single) = call(&app, "POST", "/v1/predict", Some(base.clone())).await;
    let mut w = base.clone();
    w["deltas"] = json!([]);
    let (status, v) = call(&app, "POST", "/v1/whatif", Some(w)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["estimates"].as_array().unwrap(), &vec![single.clone()]);

    let mut w = base;
    w["deltas"] = json!([{"delinquency": 0.9}, {"male": 0}]);
    let (_, v) = call(&app, "POST", "/v1/whatif", Some(w)).await;
    let est = v["estimates"].as_array().unwrap();
    assert_eq!(est.len(), 3);
    assert_eq!(est[0], single);
    let curve = |e: &Value| -> Vec<f64> { e["per_year_curve"].as_array().unwrap().iter().map(|p| p[1].as_f64().unwrap()).collect() };
    assert!(curve(&est[1]).iter().zip(curve(&est[0])).all(|(hi, lo)| *hi > lo));
}

#[tokio::test]
async fn schema_violations_are_field_level_400s() {
    let app = router(AppState::loaded(predictor()));
    let mut p = profile();
    p.as_object_mut().unwrap().remove("openness");
    p["shoe_size"] = json!(42);
    let body = json!({"profile": p, "anchor": "sometime", "a": "sixteen", "b": 21, "extra": 1});
    let (status, v) = call(&app, "POST", "/v1/predict", Some(body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let fields: Vec<&str> = v["fields"].as_array().unwrap().iter().map(|f| f["field"].as_str().unwrap()).collect();
    for f in ["profile.openness", "profile.shoe_size", "anchor", "a", "extra"] {
        assert!(fields.contains(&f), "{f} missing from {fields:?}");
    }
    let (status, _) = call(&app, "POST", "/v1/predict", Some(json!([1, 2]))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let body = json!({"profile": profile(), "anchor": "at_first_use", "a": 16, "b": 21, "first_use_age": 15});
    let (status, v) = call(&app, "POST", "/v1/predict", Some(body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["fields"][0]["field"], json!("first_use_age"));
}

#[tokio::test]
async fn out_of_range_ages_are_422() {
    let app = router(AppState::loaded(predictor()));
    for (a, b) in [(16.0, 95.0), (2.0, 10.0), (20.0, 18.0)] {
        let body = json!({"profile": profile(), "anchor": "at_age", "a": a, "b": b});
        let (status, _) = call(&app, "POST", "/v1/predict", Some(body)).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "({a}, {b})");
    }
}

#[tokio::test]
async fn request_order_does_not_change_responses() {
    let app = router(AppState::loaded(predictor()));
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let bodies: Vec<(String, Value)> = (0..12)
        .map(|i| {
            let mut p = profile();
            p["delinquency"] = json!(i as f64 / 12.0);
            let a = 14.0 + (i % 5) as f64;
            let body = json!({"profile": p, "anchor": "at_age", "a": a, "b": a + 1.0 + (i % 7) as f64});
            if i % 3 == 0 {
                let mut w = body.clone();
                w["deltas"] = json!([{"male": 0}]);
                ("/v1/whatif".to_string(), w)
            } else {
                ("/v1/predict".to_string(), body)
            }
        })
        .collect();
    let mut solo = Vec::new();
    for (uri, b) in &bodies {
        solo.push(call(&app, "POST", uri, Some(b.clone())).await.1);
    }
    for _ in 0..3 {
        let mut order: Vec<usize> = (0..bodies.len()).collect();
        order.shuffle(&mut rng);
        let handles: Vec<_> = order
            .iter()
            .map(|&i| {
                let app = app.clone();
                let (uri, b) = bodies[i].clone();
                tokio::spawn(async move { (i, call(&app, "POST", &uri, Some(b)).await.1) })
            })
            .collect();
        for h in handles {
            let (i, v) = h.await.unwrap();
            assert_eq!(v, solo[i], "request {i}");
        }
    }
}

//! HTTP prediction service.
//!
//! `GET /v1/model/meta`, `POST /v1/predict`, `POST /v1/whatif`. Every
//! handler reads the immutable loaded model; until loading finishes the
//! prediction routes answer 503.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::artifact::{ModelArtifact, Predictor};
use crate::error::{Error, Result};
use crate::hazard::CovariateProfile;
use crate::risk::{Anchor, RiskEstimate, RiskQuery};

#[derive(Debug, Clone, Default)]
pub struct AppState {
    model: Arc<OnceLock<Arc<Predictor>>>,
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn loaded(predictor: Predictor) -> Self {
        let s = Self::new();
        s.install(predictor);
        s
    }

    /// Sets the model once; later calls are ignored.
    pub fn install(&self, predictor: Predictor) {
        let _ = self.model.set(Arc::new(predictor));
    }

    fn get(&self) -> std::result::Result<Arc<Predictor>, ApiError> {
        self.model.get().cloned().ok_or(ApiError::Unavailable)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

fn field_error(field: impl Into<String>, message: impl Into<String>) -> FieldError {
    FieldError { field: field.into(), message: message.into() }
}

enum ApiError {
    Unavailable,
    Invalid(Vec<FieldError>),
    OutOfRange(String),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::Unavailable => (
                StatusCode::SERVICE_UNAVAILABLE,
                json!({"error": "model not loaded yet"}),
            ),
            ApiError::Invalid(fields) => (
                StatusCode::BAD_REQUEST,
                json!({"error": "invalid request", "fields": fields}),
            ),
            ApiError::OutOfRange(msg) => (StatusCode::UNPROCESSABLE_ENTITY, json!({"error": msg})),
            ApiError::Internal(msg) => (StatusCode::INTERNAL_SERVER_ERROR, json!({"error": msg})),
        };
        (status, Json(body)).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Domain { .. } | Error::Range { .. } => ApiError::OutOfRange(e.to_string()),
            Error::Argument(m) | Error::Schema(m) | Error::Value(m) => ApiError::Invalid(vec![field_error("", m)]),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

/// Validated prediction request shared by both POST routes.
struct Request {
    profile: CovariateProfile,
    anchor: Anchor,
    a: f64,
    b: f64,
    first_use_age: Option<f64>,
    deltas: Vec<CovariateProfile>,
}

fn number(obj: &Map<String, Value>, key: &str, errors: &mut Vec<FieldError>) -> Option<f64> {
    match obj.get(key) {
        None => {
            errors.push(field_error(key, "required"));
            None
        }
        Some(v) => match v.as_f64() {
            Some(x) if x.is_finite() => Some(x),
            _ => {
                errors.push(field_error(key, "must be a finite number"));
                None
            }
        },
    }
}

fn covariates(
    value: &Value,
    path: &str,
    names: &[String],
    require_all: bool,
    errors: &mut Vec<FieldError>,
) -> CovariateProfile {
    let mut profile = CovariateProfile::new();
    let Some(obj) = value.as_object() else {
        errors.push(field_error(path, "must be an object of covariate values"));
        return profile;
    };
    for (k, v) in obj {
        let field = format!("{path}.{k}");
        if !names.contains(k) {
            errors.push(field_error(field, "unknown covariate"));
            continue;
        }
        match v.as_f64() {
            Some(x) if x.is_finite() => profile.set(k, x),
            _ => errors.push(field_error(field, "must be a finite number")),
        }
    }
    if require_all {
        for n in names.iter().filter(|n| !obj.contains_key(*n)) {
            errors.push(field_error(format!("{path}.{n}"), "required"));
        }
    }
    profile
}

fn parse_request(body: &[u8], names: &[String], whatif: bool) -> std::result::Result<Request, ApiError> {
    let value: Value = serde_json::from_slice(body)
        .map_err(|e| ApiError::Invalid(vec![field_error("", format!("malformed JSON: {e}"))]))?;
    let Some(obj) = value.as_object() else {
        return Err(ApiError::Invalid(vec![field_error("", "body must be a JSON object")]));
    };
    let mut errors = Vec::new();
    let mut allowed = vec!["profile", "anchor", "a", "b", "first_use_age"];
    if whatif {
        allowed.push("deltas");
    }
    for k in obj.keys().filter(|k| !allowed.contains(&k.as_str())) {
        errors.push(field_error(k.as_str(), "unknown field"));
    }
    let profile = match obj.get("profile") {
        Some(v) => covariates(v, "profile", names, true, &mut errors),
        None => {
            errors.push(field_error("profile", "required"));
            CovariateProfile::new()
        }
    };
    let anchor = match obj.get("anchor").and_then(Value::as_str) {
        Some("at_first_use") => Some(Anchor::AtFirstUse),
        Some("at_age") => Some(Anchor::AtAge),
        _ => {
            errors.push(field_error("anchor", "must be `at_first_use` or `at_age`"));
            None
        }
    };
    let a = number(obj, "a", &mut errors);
    let b = number(obj, "b", &mut errors);
    let first_use_age = match obj.get("first_use_age") {
        None | Some(Value::Null) => None,
        Some(_) => number(obj, "first_use_age", &mut errors),
    };
    let mut deltas = Vec::new();
    if whatif {
        match obj.get("deltas") {
            None => {}
            Some(Value::Array(items)) => {
                for (i, d) in items.iter().enumerate() {
                    deltas.push(covariates(d, &format!("deltas[{i}]"), names, false, &mut errors));
                }
            }
            Some(_) => errors.push(field_error("deltas", "must be an array")),
        }
    }
    if let (Some(Anchor::AtFirstUse), Some(a), Some(f)) = (anchor, a, first_use_age) {
        if a != f {
            errors.push(field_error("first_use_age", "must equal `a` for at_first_use predictions"));
        }
    }
    if let (Some(a), Some(f)) = (a, first_use_age) {
        if a < f {
            errors.push(field_error("a", "precedes the age of first use"));
        }
    }
    match (errors.is_empty(), anchor, a, b) {
        (true, Some(anchor), Some(a), Some(b)) => Ok(Request { profile, anchor, a, b, first_use_age, deltas }),
        _ => Err(ApiError::Invalid(errors)),
    }
}

fn check_ages(p: &Predictor, a: f64, b: f64) -> std::result::Result<(), ApiError> {
    let (low, high) = p.artifact.age_range();
    if a < low || b > high {
        return Err(ApiError::OutOfRange(format!("ages must lie in [{low}, {high}], got a={a}, b={b}")));
    }
    if b < a {
        return Err(ApiError::OutOfRange(format!("horizon b={b} precedes start a={a}")));
    }
    Ok(())
}

fn query(r: &Request, profile: CovariateProfile) -> RiskQuery {
    let mut q = RiskQuery::new(r.a, r.b, profile, r.anchor);
    q.first_use_age = r.first_use_age;
    q
}

/// Base profile first, then the base with each delta's values overriding it.
pub fn whatif_profiles(base: &CovariateProfile, deltas: &[CovariateProfile]) -> Vec<CovariateProfile> {
    let mut out = vec![base.clone()];
    for d in deltas {
        let mut p = base.clone();
        for (k, v) in &d.0 {
            p.set(k, *v);
        }
        out.push(p);
    }
    out
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> std::result::Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map_err(ApiError::from)
}

async fn meta(State(state): State<AppState>) -> std::result::Result<Json<Value>, ApiError> {
    let p = state.get()?;
    Ok(Json(model_meta(&p.artifact)))
}

pub fn model_meta(a: &ModelArtifact) -> Value {
    let h = &a.header;
    let (low, high) = a.age_range();
    let diagnostics = h.diagnostics.as_ref().map(|d| {
        json!({
            "converged": d.converged(),
            "max_rhat": d.rhat.iter().copied().filter(|x| x.is_finite()).fold(f64::NAN, f64::max),
            "min_ess": d.ess.iter().copied().filter(|x| x.is_finite()).fold(f64::NAN, f64::min),
            "divergences": d.chains.iter().map(|c| c.divergences).sum::<usize>(),
            "chains": d.chains.len(),
        })
    });
    json!({
        "format_version": h.format_version,
        "created_by": h.created_by,
        "covariates": h.covariate_ranges,
        "age_range": [low, high],
        "anchors": ["at_first_use", "at_age"],
        "n_draws": h.n_draws,
        "thinned_from": h.thinned_from,
        "life_table": h.life_table.source,
        "seed": h.seed,
        "config_digest": h.config_digest,
        "diagnostics": diagnostics,
    })
}

async fn predict(State(state): State<AppState>, body: Bytes) -> std::result::Result<Json<RiskEstimate>, ApiError> {
    let p = state.get()?;
    let r = parse_request(&body, &p.artifact.header.covariates, false)?;
    check_ages(&p, r.a, r.b)?;
    let q = query(&r, r.profile.clone());
    Ok(Json(blocking(move || p.predict(&q)).await?))
}

async fn whatif(State(state): State<AppState>, body: Bytes) -> std::result::Result<Json<Value>, ApiError> {
    let p = state.get()?;
    let r = parse_request(&body, &p.artifact.header.covariates, true)?;
    check_ages(&p, r.a, r.b)?;
    let queries: Vec<RiskQuery> = whatif_profiles(&r.profile, &r.deltas).into_iter().map(|x| query(&r, x)).collect();
    let estimates = blocking(move || queries.iter().map(|q| p.predict(q)).collect::<Result<Vec<_>>>()).await?;
    Ok(Json(json!({ "estimates": estimates })))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/model/meta", get(meta))
        .route("/v1/predict", post(predict))
        .route("/v1/whatif", post(whatif))
        .with_state(state)
}

/// Binds `port`, loads the artifact in the background and serves until the
/// process is stopped. A load failure shuts the server down and is returned.
pub async fn serve(model: PathBuf, port: u16) -> Result<()> {
    let state = AppState::new();
    let addr = SocketAddr::from(([0, 0, 0, 0], port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(format!("port {port}"), e))?;
    let (tx, rx) = tokio::sync::oneshot::channel::<Error>();
    let loader = state.clone();
    tokio::task::spawn_blocking(move || match ModelArtifact::load(&model) {
        Ok(artifact) => {
            log::info!("loaded {} draws from {}", artifact.draws.len(), model.display());
            loader.install(Predictor::new(artifact));
        }
        Err(e) => {
            let _ = tx.send(e);
        }
    });
    let failure = Arc::new(std::sync::Mutex::new(None));
    let slot = failure.clone();
    log::info!("listening on {addr}");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async move {
            match rx.await {
                Ok(e) => {
                    log::error!("model load failed: {e}");
                    *slot.lock().expect("unpoisoned") = Some(e);
                }
                Err(_) => std::future::pending::<()>().await,
            }
        })
        .await
        .map_err(|e| Error::io(addr.to_string(), e))?;
    let outcome = failure.lock().expect("unpoisoned").take();
    outcome.map_or(Ok(()), Err)
}

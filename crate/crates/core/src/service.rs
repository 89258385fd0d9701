//! HTTP prediction service over an immutable, thinned posterior snapshot.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{Any, CorsLayer};

use crate::bundle::{thin, BundleError, Manifest, ModelBundle};
use crate::data::{AgeStandardization, Covariates, Sex};
use crate::diagnostics::RunStatus;
use crate::model::{ConstrainedParams, EvidenceState, ModelConfig};
use crate::predictive::{patient_probability, CumulativeCurve, PredictiveError, DEFAULT_LEVEL};

/// Upper bound on the draws used per request.
pub const MAX_SERVED_DRAWS: usize = 2000;
pub const TRAJECTORY_STEP_MIN: f64 = 5.0;
pub const BUNDLE_ENV: &str = "TTU_BUNDLE";

#[derive(Debug, Clone, PartialEq)]
pub enum ApiError {
    Range(String),
    Schema(String),
    NoBundle,
    NotFound(String),
}

impl ApiError {
    fn parts(&self) -> (StatusCode, &'static str, String) {
        match self {
            ApiError::Range(m) => (StatusCode::BAD_REQUEST, "range", m.clone()),
            ApiError::Schema(m) => (StatusCode::BAD_REQUEST, "schema", m.clone()),
            ApiError::NoBundle => (
                StatusCode::SERVICE_UNAVAILABLE,
                "no_bundle",
                "no model bundle is loaded".to_string(),
            ),
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, "not_found", m.clone()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code, message) = self.parts();
        (status, Json(json!({ "error": { "code": code, "message": message } }))).into_response()
    }
}

impl From<PredictiveError> for ApiError {
    fn from(e: PredictiveError) -> Self {
        match e {
            PredictiveError::Range(r) => ApiError::Range(r.to_string()),
            other => ApiError::Schema(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    #[serde(default)]
    pub age_years: Option<f64>,
    #[serde(default)]
    pub sex: Option<Sex>,
    pub state: EvidenceState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub p_mean: f64,
    pub p_low: f64,
    pub p_high: f64,
    pub level: f64,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub p_mean: Vec<f64>,
    pub p_low: Vec<f64>,
    pub p_high: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub not_yet: Branch,
    pub voided_at: Branch,
    pub level: f64,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thinning {
    pub stride: usize,
    pub served_draws: usize,
    pub total_draws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub status: RunStatus,
    pub max_rhat: f64,
    pub min_ess_bulk: f64,
    pub divergence_count: usize,
    pub total_transitions: usize,
    pub mu1_clamp_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub manifest: Manifest,
    pub diagnostics: DiagnosticsSummary,
    pub thinning: Thinning,
    pub level: f64,
}

/// What the service holds for a loaded bundle.
#[derive(Debug, Clone)]
pub struct ServedModel {
    draws: Vec<ConstrainedParams>,
    model_cfg: ModelConfig,
    standardization: AgeStandardization,
    curve: Option<CumulativeCurve>,
    meta: Meta,
}

impl ServedModel {
    /// Checks the bundle is servable and thins its draws.
    pub fn from_bundle(bundle: ModelBundle) -> Result<Self, BundleError> {
        bundle.check_servable()?;
        let all = bundle.constrained();
        let (draws, stride) = thin(&all, MAX_SERVED_DRAWS);
        let d = &bundle.diagnostics;
        let meta = Meta {
            diagnostics: DiagnosticsSummary {
                status: d.status,
                max_rhat: d.max_rhat(),
                min_ess_bulk: d.ess_bulk.iter().copied().fold(f64::INFINITY, f64::min),
                divergence_count: d.divergence_count,
                total_transitions: d.total_transitions,
                mu1_clamp_count: d.mu1_clamp_count,
            },
            thinning: Thinning {
                stride,
                served_draws: draws.len(),
                total_draws: all.len(),
            },
            level: DEFAULT_LEVEL,
            manifest: bundle.manifest.clone(),
        };
        Ok(Self {
            draws,
            model_cfg: bundle.manifest.model,
            standardization: bundle.standardization(),
            curve: bundle.curve,
            meta,
        })
    }

    pub fn model_id(&self) -> &str {
        &self.meta.manifest.model_id
    }

    pub fn meta(&self) -> &Meta {
        &self.meta
    }

    pub fn draws(&self) -> &[ConstrainedParams] {
        &self.draws
    }

    fn covariates(&self, age_years: Option<f64>, sex: Option<Sex>) -> Result<Covariates, ApiError> {
        if let Some(a) = age_years {
            if !(a.is_finite() && a >= 0.0) {
                return Err(ApiError::Range(format!("age_years must be a nonnegative number, got {a}")));
            }
        }
        Ok(Covariates::from_raw(age_years, sex, &self.standardization))
    }

    pub fn predict(&self, req: &PredictRequest) -> Result<PredictResponse, ApiError> {
        let x = self.covariates(req.age_years, req.sex)?;
        let s = patient_probability(&self.draws, &x, req.state, &self.model_cfg, DEFAULT_LEVEL)?;
        Ok(PredictResponse {
            p_mean: s.mean,
            p_low: s.low,
            p_high: s.high,
            level: s.level,
            model_id: self.model_id().to_string(),
        })
    }

    pub fn trajectory(&self, age_years: Option<f64>, sex: Option<Sex>) -> Result<Trajectory, ApiError> {
        let x = self.covariates(age_years, sex)?;
        let c = self.model_cfg.censor_limit_min;
        let steps = (c / TRAJECTORY_STEP_MIN).floor() as usize;
        let t: Vec<f64> = (0..=steps).map(|k| k as f64 * TRAJECTORY_STEP_MIN).collect();
        let branch = |make: fn(f64) -> EvidenceState| -> Result<Branch, ApiError> {
            let mut b = Branch {
                p_mean: Vec::with_capacity(t.len()),
                p_low: Vec::with_capacity(t.len()),
                p_high: Vec::with_capacity(t.len()),
            };
            for &ti in &t {
                let s = patient_probability(&self.draws, &x, make(ti), &self.model_cfg, DEFAULT_LEVEL)?;
                b.p_mean.push(s.mean);
                b.p_low.push(s.low);
                b.p_high.push(s.high);
            }
            Ok(b)
        };
        Ok(Trajectory {
            not_yet: branch(|t_min| EvidenceState::NotYet { t_min })?,
            voided_at: branch(|t_min| EvidenceState::VoidedAt { t_min })?,
            t,
            level: DEFAULT_LEVEL,
            model_id: self.model_id().to_string(),
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct AppState {
    pub model: Option<Arc<ServedModel>>,
}

impl AppState {
    pub fn with_model(model: ServedModel) -> Self {
        Self {
            model: Some(Arc::new(model)),
        }
    }

    fn model(&self) -> Result<&ServedModel, ApiError> {
        self.model.as_deref().ok_or(ApiError::NoBundle)
    }
}

async fn predict(State(state): State<AppState>, body: Bytes) -> Result<Json<PredictResponse>, ApiError> {
    let model = state.model()?;
    let req: PredictRequest = serde_json::from_slice(&body).map_err(|e| ApiError::Schema(e.to_string()))?;
    model.predict(&req).map(Json)
}

async fn curve(State(state): State<AppState>) -> Result<Json<CumulativeCurve>, ApiError> {
    state
        .model()?
        .curve
        .clone()
        .map(Json)
        .ok_or_else(|| ApiError::NotFound("bundle has no stored curve".to_string()))
}

async fn trajectory(
    State(state): State<AppState>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Json<Trajectory>, ApiError> {
    let model = state.model()?;
    if let Some(k) = q.keys().find(|k| *k != "age" && *k != "sex") {
        return Err(ApiError::Schema(format!("unknown query parameter {k}")));
    }
    let age = match q.get("age").map(String::as_str) {
        None | Some("") => None,
        Some(s) => Some(
            s.parse::<f64>()
                .map_err(|_| ApiError::Schema(format!("age must be a number, got {s:?}")))?,
        ),
    };
    let sex = match q.get("sex").map(String::as_str) {
        None | Some("") => None,
        Some("F") => Some(Sex::Female),
        Some("M") => Some(Sex::Male),
        Some(s) => return Err(ApiError::Schema(format!("sex must be F or M, got {s:?}"))),
    };
    model.trajectory(age, sex).map(Json)
}

async fn meta(State(state): State<AppState>) -> Result<Json<Meta>, ApiError> {
    Ok(Json(state.model()?.meta.clone()))
}

/// Routes under `/api/v1`. `cors_origin` of `"*"` allows any origin.
pub fn router(state: AppState, cors_origin: Option<&str>) -> Result<Router, anyhow::Error> {
    let mut app = Router::new()
        .route("/api/v1/predict", post(predict))
        .route("/api/v1/curve", get(curve))
        .route("/api/v1/trajectory", get(trajectory))
        .route("/api/v1/meta", get(meta))
        .with_state(state);
    if let Some(origin) = cors_origin {
        let layer = CorsLayer::new().allow_methods(Any).allow_headers(Any);
        let layer = if origin == "*" {
            layer.allow_origin(Any)
        } else {
            layer.allow_origin(HeaderValue::from_str(origin)?)
        };
        app = app.layer(layer);
    }
    Ok(app)
}

pub async fn serve(state: AppState, addr: SocketAddr, cors_origin: Option<&str>) -> anyhow::Result<()> {
    let app = router(state, cors_origin)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

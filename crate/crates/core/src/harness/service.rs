//! HTTP session service.
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | POST | `/sessions` | `{query_id}` or `{query}` | `{session_id, initial_observation}` |
//! | POST | `/sessions/{id}/step` | `{assistant_text}` | step result with rendered observation |
//! | GET | `/sessions/{id}/trajectory` | | trajectory record |
//! | DELETE | `/sessions/{id}` | | 204 |
//! | POST | `/score` | `{trajectory}` or `{session_id}`, optional `weights` | reward breakdown |
//! | POST | `/advantages` | `{rewards, eps?}` | `{advantages}` |
//!
//! Unknown sessions answer 404, stepping a finished session 409 and
//! malformed bodies 400. Steps on one session run one at a time.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::ImageMode;
use super::persist::TrajectoryRecord;
use crate::environment::{EnvError, Environment, Session, StepResult};
use crate::grammar::FormatError;
use crate::grpo::{group_advantages, DEFAULT_EPS};
use crate::rewards::{score_trajectory, Judge, RewardWeights};
use crate::types::{PageImage, PixelSource, Query, Role, TerminationReason, Trajectory, Turn};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireImage {
    pub doc_id: String,
    pub width: u32,
    pub height: u32,
    /// Base64 PNG.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireTurn {
    pub role: Role,
    pub text: String,
    pub images: Vec<WireImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireStepResult {
    pub observation: Option<WireTurn>,
    pub terminated: bool,
    pub termination_reason: TerminationReason,
    pub errors: Vec<FormatError>,
    pub warnings: Vec<String>,
}

fn file_url(path: &Path) -> String {
    let abs = std::fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf());
    format!("file://{}", abs.display())
}

pub fn wire_image(page: &PageImage, mode: ImageMode) -> WireImage {
    let b64 = |bytes: Vec<u8>| base64::engine::general_purpose::STANDARD.encode(bytes);
    let (data, url) = match (&page.source, mode) {
        (PixelSource::Virtual, _) => (None, None),
        (PixelSource::File { path }, ImageMode::FileUrl) => (None, Some(file_url(path))),
        (PixelSource::File { path }, ImageMode::Base64) => {
            (std::fs::read(path).ok().map(b64), None)
        }
        // in-memory crops have no file to point at
        (PixelSource::Memory { png }, _) => (crate::types::encode_png(png).ok().map(b64), None),
    };
    WireImage {
        doc_id: page.doc_id.clone(),
        width: page.width,
        height: page.height,
        data,
        url,
    }
}

pub fn wire_turn(turn: &Turn, mode: ImageMode) -> WireTurn {
    WireTurn {
        role: turn.role,
        text: turn.text.clone(),
        images: turn.images.iter().map(|p| wire_image(p, mode)).collect(),
    }
}

/// The wire form the service returns for a step.
pub fn wire_step(result: &StepResult, mode: ImageMode) -> WireStepResult {
    WireStepResult {
        observation: result.observation.as_ref().map(|t| wire_turn(t, mode)),
        terminated: result.terminated,
        termination_reason: result.termination_reason,
        errors: result.errors.clone(),
        warnings: result.warnings.clone(),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    #[serde(default)]
    pub query_id: Option<String>,
    #[serde(default)]
    pub query: Option<Query>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub session_id: String,
    pub initial_observation: WireTurn,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRequest {
    pub assistant_text: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRequest {
    #[serde(default)]
    pub trajectory: Option<Trajectory>,
    #[serde(default)]
    pub session_id: Option<String>,
    #[serde(default)]
    pub weights: Option<RewardWeights>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvantagesRequest {
    pub rewards: Vec<f64>,
    #[serde(default)]
    pub eps: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AdvantagesResponse {
    pub advantages: Vec<f64>,
}

pub struct ServiceState {
    env: Environment,
    queries: BTreeMap<String, Query>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
    image_mode: ImageMode,
    weights: RewardWeights,
    judge: Arc<dyn Judge>,
}

impl ServiceState {
    pub fn new(
        env: Environment,
        queries: Vec<Query>,
        judge: Arc<dyn Judge>,
        weights: RewardWeights,
        image_mode: ImageMode,
    ) -> Self {
        Self {
            env,
            queries: queries.into_iter().map(|q| (q.id.clone(), q)).collect(),
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(0),
            image_mode,
            weights,
            judge,
        }
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .lock()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(serde_json::json!({ "error": self.message })),
        )
            .into_response()
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

type Shared = Arc<ServiceState>;

async fn create_session(
    State(state): State<Shared>,
    body: Bytes,
) -> Result<Json<CreateSessionResponse>, ApiError> {
    let req: CreateSessionRequest = parse(&body)?;
    let query =
        match (req.query, req.query_id) {
            (Some(q), None) => q,
            (None, Some(id)) => state.queries.get(&id).cloned().ok_or_else(|| {
                ApiError::new(StatusCode::NOT_FOUND, format!("unknown query {id}"))
            })?,
            _ => {
                return Err(ApiError::bad_request(
                    "give exactly one of query_id or query",
                ))
            }
        };
    let session = state
        .env
        .create_session(query)
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    let initial = wire_turn(&session.history()[0], state.image_mode);
    let id = format!("s{}", state.next_id.fetch_add(1, Ordering::Relaxed));
    state
        .sessions
        .lock()
        .expect("session table poisoned")
        .insert(id.clone(), Arc::new(Mutex::new(session)));
    Ok(Json(CreateSessionResponse {
        session_id: id,
        initial_observation: initial,
    }))
}

async fn step_session(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<WireStepResult>, ApiError> {
    let session = state.session(&id)?;
    let req: StepRequest = parse(&body)?;
    let mode = state.image_mode;
    let result = tokio::task::spawn_blocking(move || {
        let mut s = session.lock().expect("session poisoned");
        s.step(&req.assistant_text).map(|r| wire_step(&r, mode))
    })
    .await
    .map_err(internal)?;
    match result {
        Ok(r) => Ok(Json(r)),
        Err(EnvError::StepAfterTermination) => Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("session {id} has terminated"),
        )),
        Err(e) => Err(ApiError::bad_request(e.to_string())),
    }
}

async fn get_trajectory(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<TrajectoryRecord>, ApiError> {
    let session = state.session(&id)?;
    let traj = session
        .lock()
        .expect("session poisoned")
        .trajectory()
        .clone();
    Ok(Json(TrajectoryRecord::from(traj)))
}

async fn delete_session(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
) -> Result<StatusCode, ApiError> {
    state
        .sessions
        .lock()
        .expect("session table poisoned")
        .remove(&id)
        .map(|_| StatusCode::NO_CONTENT)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}")))
}

async fn score(
    State(state): State<Shared>,
    body: Bytes,
) -> Result<Json<crate::types::RewardBreakdown>, ApiError> {
    let req: ScoreRequest = parse(&body)?;
    let traj = match (req.trajectory, req.session_id) {
        (Some(t), None) => t,
        (None, Some(id)) => state
            .session(&id)?
            .lock()
            .expect("session poisoned")
            .trajectory()
            .clone(),
        _ => {
            return Err(ApiError::bad_request(
                "give exactly one of trajectory or session_id",
            ))
        }
    };
    let weights = req.weights.unwrap_or(state.weights);
    weights
        .validate()
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    let judge = state.judge.clone();
    let result =
        tokio::task::spawn_blocking(move || score_trajectory(&traj, judge.as_ref(), &weights))
            .await
            .map_err(internal)?;
    result
        .map(Json)
        .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, e.to_string()))
}

async fn advantages(body: Bytes) -> Result<Json<AdvantagesResponse>, ApiError> {
    let req: AdvantagesRequest = parse(&body)?;
    group_advantages(&req.rewards, req.eps.unwrap_or(DEFAULT_EPS))
        .map(|advantages| Json(AdvantagesResponse { advantages }))
        .map_err(|e| ApiError::bad_request(e.to_string()))
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", axum::routing::delete(delete_session))
        .route("/sessions/{id}/step", post(step_session))
        .route("/sessions/{id}/trajectory", get(get_trajectory))
        .route("/score", post(score))
        .route("/advantages", post(advantages))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(state: Shared, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

//! JSON-over-HTTP API for live sessions.
//!
//! | method | path                         |                                   |
//! |--------|------------------------------|-----------------------------------|
//! | GET    | /healthz                     | liveness, never authenticated     |
//! | POST   | /sessions                    | start from a case or a complaint  |
//! | GET    | /sessions?state=...          | list, optionally by state         |
//! | GET    | /sessions/{id}               | transcript so far plus state      |
//! | POST   | /sessions/{id}/fulfill       | `{step, answer}` physician result |
//! | GET    | /sessions/{id}/events        | the session's event log           |
//! | GET    | /sessions/{id}/report        | metric report fragment            |

use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use clinflow_core::oracle::{ClinicalInfoDoc, Section};
use clinflow_core::CaseRecord;

use crate::sessions::{AssistantKind, FulfillError, SessionManager, SessionState};

pub const DEFAULT_QUESTION: &str = "What is the most likely diagnosis?";

#[derive(Clone)]
pub struct AppState {
    pub sessions: Arc<SessionManager>,
    pub token: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn not_found(id: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}"))
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::unprocessable(r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        ApiError::unprocessable(r.body_text())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartRequest {
    #[serde(default)]
    pub case: Option<CaseRecord>,
    #[serde(default)]
    pub chief_complaint: Option<String>,
    #[serde(default)]
    pub question: Option<String>,
    #[serde(default)]
    pub case_id: Option<String>,
    #[serde(default)]
    pub assistant: AssistantKind,
}

impl StartRequest {
    /// The case to run and whether it can be scored.
    fn into_case(self) -> Result<(CaseRecord, bool, AssistantKind), ApiError> {
        match (self.case, self.chief_complaint) {
            (Some(case), None) => {
                case.validate().map_err(ApiError::unprocessable)?;
                Ok((case, true, self.assistant))
            }
            (None, Some(cc)) => {
                if cc.trim().is_empty() {
                    return Err(ApiError::unprocessable("chief_complaint must be non-empty"));
                }
                if self.assistant == AssistantKind::Oracle {
                    return Err(ApiError::unprocessable("the oracle assistant needs a full case"));
                }
                let case = CaseRecord {
                    case_id: self.case_id.unwrap_or_else(|| "adhoc".into()),
                    question: self.question.unwrap_or_else(|| DEFAULT_QUESTION.into()),
                    chief_complaint: cc,
                    clinical_info: ClinicalInfoDoc::new("", vec![Section::new("Note", "unavailable")]),
                    gold_answer: String::new(),
                    department: None,
                    task: None,
                };
                Ok((case, false, self.assistant))
            }
            _ => Err(ApiError::unprocessable("provide exactly one of `case` or `chief_complaint`")),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FulfillRequest {
    pub step: usize,
    pub answer: String,
}

#[derive(Debug, Deserialize)]
pub struct ListQuery {
    pub state: Option<SessionState>,
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn start(
    State(app): State<AppState>,
    body: Result<Json<StartRequest>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(req) = body?;
    let (case, scored, assistant) = req.into_case()?;
    let session = app
        .sessions
        .start(case, scored, assistant)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok((
        StatusCode::CREATED,
        Json(json!({ "session_id": session.id, "state": session.state() })),
    ))
}

async fn list(
    State(app): State<AppState>,
    query: Result<Query<ListQuery>, QueryRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Query(q) = query?;
    Ok(Json(json!({ "sessions": app.sessions.list(q.state) })))
}

async fn show(State(app): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let s = app.sessions.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    Ok(Json(s.view()))
}

async fn events(State(app): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let s = app.sessions.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    Ok(Json(json!({ "events": s.events() })))
}

async fn fulfill(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<FulfillRequest>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let s = app.sessions.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let Json(req) = body?;
    match s.fulfill(req.step, &req.answer) {
        Ok(state) => Ok(Json(json!({ "session_id": id, "state": state }))),
        Err(e @ FulfillError::EmptyAnswer) => Err(ApiError::unprocessable(e.to_string())),
        Err(e) => Err(ApiError::new(StatusCode::CONFLICT, e.to_string())),
    }
}

async fn report(State(app): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let s = app.sessions.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    match s.report(app.sessions.eval()) {
        Some(Ok(r)) => Ok(Json(r)),
        Some(Err(e)) => Err(ApiError::new(StatusCode::BAD_GATEWAY, e)),
        None => Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("session is {:?}; no report yet", s.state()),
        )),
    }
}

async fn require_token(State(app): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &app.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

pub fn router(app: AppState) -> Router {
    let api = Router::new()
        .route("/sessions", post(start).get(list))
        .route("/sessions/{id}", get(show))
        .route("/sessions/{id}/fulfill", post(fulfill))
        .route("/sessions/{id}/events", get(events))
        .route("/sessions/{id}/report", get(report))
        .route_layer(middleware::from_fn_with_state(app.clone(), require_token));
    Router::new().route("/healthz", get(healthz)).merge(api).with_state(app)
}

/// Serves until the listener fails or ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, app: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

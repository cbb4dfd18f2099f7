//! `POST /rerank`: re-rank one query's candidates.
//!
//! Request: `{"query": {query_id, reference_image_id, modification_text |
//! captions, category}, "candidates": [{candidate_id, score}],
//! "questions": [...]}`. Without `questions`, they are generated with the
//! text backend. The response carries the ranking and the reasoning trace.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use vqarank::clients::{TextBackend, VqaBackend};
use vqarank::domain::RawQueryRecord;
use vqarank::question_generation::QuestionGenerator;
use vqarank::{
    CirScore, Ranking, ReasoningTrace, RerankConfig, RerankEngine, RerankError, RetrievalQuery,
    VisualQuestion,
};

use crate::backends;
use crate::commands;
use crate::config::Config;
use crate::error::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RerankRequest {
    pub query: RawQueryRecord,
    pub candidates: Vec<CirScore>,
    #[serde(default)]
    pub questions: Option<Vec<VisualQuestion>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RerankResponse {
    pub query_id: String,
    pub ranking: Ranking,
    pub trace: ReasoningTrace,
    pub requests_issued: usize,
}

/// Backends and settings shared by all requests. Holds no per-request state.
pub struct AppState {
    pub rerank: RerankConfig,
    pub vqa: Arc<dyn VqaBackend>,
    pub text: Option<Arc<dyn TextBackend>>,
    pub generator: QuestionGenerator,
    pub retry_budget: u32,
}

impl AppState {
    /// Builds blocking HTTP clients, so call it outside any async runtime.
    pub fn from_config(config: &Config) -> Result<Self, CliError> {
        let vqa = backends::vqa_role(config)?.backend;
        // Question generation is optional: requests may bring their own.
        let text = match backends::text_role(config) {
            Ok(role) => Some(role.backend),
            Err(CliError::Usage(why)) => {
                tracing::info!("no text backend, requests must include questions: {why}");
                None
            }
            Err(e) => return Err(e),
        };
        Ok(Self {
            rerank: config.rerank.clone(),
            vqa,
            text,
            generator: commands::generator(config)?,
            retry_budget: config.questions.retry_budget,
        })
    }
}

enum ApiError {
    BadRequest { message: String, path: Option<String> },
    Backend(String),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::BadRequest { message, path } => {
                (StatusCode::BAD_REQUEST, json!({ "error": message, "path": path }))
            }
            ApiError::Backend(message) => (StatusCode::BAD_GATEWAY, json!({ "error": message })),
            ApiError::Internal(message) => {
                (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": message }))
            }
        };
        (status, Json(body)).into_response()
    }
}

fn bad_request(message: impl ToString) -> ApiError {
    ApiError::BadRequest {
        message: message.to_string(),
        path: None,
    }
}

fn parse_request(body: &[u8]) -> Result<RerankRequest, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ApiError::BadRequest {
            message: e.into_inner().to_string(),
            path: Some(path),
        }
    })
}

fn handle(state: &AppState, request: RerankRequest) -> Result<RerankResponse, ApiError> {
    let query = RetrievalQuery::from_raw(&request.query).map_err(bad_request)?;
    let questions = match request.questions {
        Some(qs) if qs.is_empty() => return Err(bad_request("questions must not be empty")),
        Some(qs) => qs,
        None => {
            let text = state.text.as_ref().ok_or_else(|| {
                bad_request("no text backend configured; include questions in the request")
            })?;
            state
                .generator
                .generate(&query, &**text, state.retry_budget)
                .map_err(|e| ApiError::Backend(e.to_string()))?
        }
    };
    let engine = RerankEngine::new(state.rerank.clone(), &*state.vqa)
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    match engine.rerank(&query, &request.candidates, &questions) {
        Ok(out) => Ok(RerankResponse {
            query_id: query.query_id,
            ranking: out.ranking,
            trace: out.trace,
            requests_issued: out.requests_issued,
        }),
        Err(e @ RerankError::BackendUnavailable(_)) => Err(ApiError::Backend(e.to_string())),
        Err(e) => Err(bad_request(e)),
    }
}

async fn rerank_handler(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let request = match parse_request(&body) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    let result = tokio::task::spawn_blocking(move || handle(&state, request)).await;
    match result {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(join) => ApiError::Internal(join.to_string()).into_response(),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/rerank", post(rerank_handler))
        .with_state(state)
}

pub async fn run(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

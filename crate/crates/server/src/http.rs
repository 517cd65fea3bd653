//! HTTP binding of the internal API. All bodies are JSON except the
//! multipart upload and artifact downloads.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use feedlens_core::store::Format;
use feedlens_core::topics::Decision;
use serde::Deserialize;
use serde_json::json;

use crate::app::{App, AppError};

impl IntoResponse for AppError {
    fn into_response(self) -> Response {
        let status = match &self {
            AppError::NotFound(_) => StatusCode::NOT_FOUND,
            AppError::Conflict(_) => StatusCode::CONFLICT,
            AppError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            AppError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            AppError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

type ApiResult = Result<Response, AppError>;

/// Runs blocking work (gateway calls, kernel turns, file IO) off the async
/// workers.
async fn blocking<T, F>(app: &Arc<App>, f: F) -> Result<T, AppError>
where
    T: Send + 'static,
    F: FnOnce(&App) -> Result<T, AppError> + Send + 'static,
{
    let app = app.clone();
    tokio::task::spawn_blocking(move || f(&app))
        .await
        .map_err(|e| AppError::Internal(format!("worker failed: {e}")))?
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, AppError> {
    payload
        .map(|Json(v)| v)
        .map_err(|e| AppError::Invalid(e.body_text()))
}

fn ok(value: impl serde::Serialize) -> ApiResult {
    Ok(Json(value).into_response())
}

fn accepted_job(id: String) -> ApiResult {
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": id }))).into_response())
}

pub fn router(app: Arc<App>) -> Router {
    Router::new()
        .route("/health", get(|| async { Json(json!({ "status": "ok" })) }))
        .route("/ingest", post(ingest))
        .route("/classify/run", post(classify_run))
        .route("/jobs/{id}", get(job))
        .route("/jobs/{id}/cancel", post(cancel_job))
        .route("/topics/round1", post(round1))
        .route("/topics/candidates", get(candidates))
        .route("/topics/review", post(review))
        .route("/topics/round2", post(round2))
        .route("/eval/classify", post(eval_classify))
        .route("/eval/topics", post(eval_topics))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session).delete(close_session))
        .route("/sessions/{id}/ask", post(ask))
        .route("/sessions/{id}/history", get(history))
        .route("/artifacts/{token}", get(artifact))
        .layer(middleware::from_fn_with_state(app.clone(), require_token))
        .with_state(app)
}

async fn require_token(
    State(app): State<Arc<App>>,
    headers: HeaderMap,
    req: Request,
    next: Next,
) -> Response {
    let open = req.uri().path().starts_with("/artifacts/") || req.uri().path() == "/health";
    if let (Some(token), false) = (&app.config().server.token, open) {
        let given = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token.as_str()) {
            return (
                StatusCode::UNAUTHORIZED,
                Json(json!({ "error": "missing or wrong bearer token" })),
            )
                .into_response();
        }
    }
    next.run(req).await
}

#[derive(Deserialize)]
struct FormatQuery {
    format: Option<String>,
}

/// Multipart form with a `file` part and an optional `format` part (or
/// `?format=`). Without either, the file name's extension decides.
async fn ingest(
    State(app): State<Arc<App>>,
    Query(q): Query<FormatQuery>,
    mut form: Multipart,
) -> ApiResult {
    let mut file: Option<(Option<String>, Vec<u8>)> = None;
    let mut format = q.format;
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| AppError::Invalid(e.body_text()))?
    {
        match field.name() {
            Some("file") => {
                let name = field.file_name().map(str::to_string);
                let bytes = field
                    .bytes()
                    .await
                    .map_err(|e| AppError::Invalid(e.body_text()))?;
                file = Some((name, bytes.to_vec()));
            }
            Some("format") => {
                format = Some(
                    field
                        .text()
                        .await
                        .map_err(|e| AppError::Invalid(e.body_text()))?,
                )
            }
            _ => {}
        }
    }
    let (name, bytes) =
        file.ok_or_else(|| AppError::Invalid("multipart body has no file part".into()))?;
    let format = format
        .or_else(|| {
            name.as_deref()
                .and_then(|n| n.rsplit_once('.'))
                .map(|(_, ext)| ext.to_string())
        })
        .ok_or_else(|| AppError::Invalid("format is required".into()))?;
    let format: Format = format.parse().map_err(AppError::Invalid)?;
    ok(blocking(&app, move |app| app.ingest(&bytes, format)).await?)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifyBody {
    dimension: String,
    k: Option<usize>,
}

async fn classify_run(
    State(app): State<Arc<App>>,
    payload: Result<Json<ClassifyBody>, JsonRejection>,
) -> ApiResult {
    let b = body(payload)?;
    accepted_job(app.start_classify(&b.dimension, b.k)?)
}

async fn job(State(app): State<Arc<App>>, Path(id): Path<String>) -> ApiResult {
    ok(app.job(&id)?)
}

async fn cancel_job(State(app): State<Arc<App>>, Path(id): Path<String>) -> ApiResult {
    ok(app.cancel_job(&id)?)
}

async fn round1(State(app): State<Arc<App>>) -> ApiResult {
    accepted_job(app.start_round_one()?)
}

async fn candidates(State(app): State<Arc<App>>) -> ApiResult {
    ok(app.candidates()?)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReviewBody {
    decisions: BTreeMap<String, Decision>,
}

async fn review(
    State(app): State<Arc<App>>,
    payload: Result<Json<ReviewBody>, JsonRejection>,
) -> ApiResult {
    let b = body(payload)?;
    ok(blocking(&app, move |app| app.review(&b.decisions)).await?)
}

async fn round2(State(app): State<Arc<App>>) -> ApiResult {
    accepted_job(app.start_round_two()?)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalClassifyBody {
    dimension: String,
    k: Option<usize>,
    seed: Option<u64>,
}

async fn eval_classify(
    State(app): State<Arc<App>>,
    payload: Result<Json<EvalClassifyBody>, JsonRejection>,
) -> ApiResult {
    let b = body(payload)?;
    accepted_job(app.start_eval_classify(&b.dimension, b.k, b.seed)?)
}

async fn eval_topics(State(app): State<Arc<App>>) -> ApiResult {
    ok(blocking(&app, |app| Ok(app.eval_topics())).await?)
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SessionBody {
    id: Option<String>,
}

async fn create_session(State(app): State<Arc<App>>, raw: axum::body::Bytes) -> ApiResult {
    let b: SessionBody = if raw.iter().all(u8::is_ascii_whitespace) {
        SessionBody::default()
    } else {
        serde_json::from_slice(&raw).map_err(|e| AppError::Invalid(e.to_string()))?
    };
    let handle = blocking(&app, move |app| match b.id {
        Some(id) => app.create_session_with_id(&id),
        None => app.create_session(),
    })
    .await?;
    Ok((StatusCode::CREATED, Json(handle)).into_response())
}

async fn session(State(app): State<Arc<App>>, Path(id): Path<String>) -> ApiResult {
    ok(app.session(&id)?)
}

async fn close_session(State(app): State<Arc<App>>, Path(id): Path<String>) -> ApiResult {
    ok(blocking(&app, move |app| app.close_session(&id)).await?)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AskBody {
    question: String,
}

async fn ask(
    State(app): State<Arc<App>>,
    Path(id): Path<String>,
    payload: Result<Json<AskBody>, JsonRejection>,
) -> ApiResult {
    let b = body(payload)?;
    ok(blocking(&app, move |app| app.ask(&id, &b.question)).await?)
}

async fn history(State(app): State<Arc<App>>, Path(id): Path<String>) -> ApiResult {
    ok(blocking(&app, move |app| app.history(&id)).await?)
}

async fn artifact(State(app): State<Arc<App>>, Path(token): Path<String>) -> ApiResult {
    let (bytes, content_type) = blocking(&app, move |app| app.artifact(&token)).await?;
    Ok(([(header::CONTENT_TYPE, content_type)], bytes).into_response())
}

/// Serves until Ctrl-C.
pub async fn serve(app: Arc<App>) -> std::io::Result<()> {
    let addr = format!("{}:{}", app.config().server.host, app.config().server.port);
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

//! JSON API over review tasks and an append-only judgment log, plus static
//! frontend assets.

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Query, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use intent_augment::augment::GeneratedRecord;
use intent_augment::corpus::Utterance;
use intent_augment::review::{self, Answer, Judgment, JudgmentLog, ReviewStats, ReviewTask};
use intent_augment::Error;
use serde::{Deserialize, Serialize};

const FALLBACK_INDEX: &str = include_str!("../assets/index.html");

/// Tasks and generated data are immutable; only the log and leases change.
pub struct ReviewState {
    tasks: Arc<Vec<ReviewTask>>,
    by_id: BTreeMap<String, usize>,
    generated: Arc<Vec<Utterance>>,
    log: Mutex<JudgmentLog>,
    leases: Mutex<BTreeMap<String, String>>,
    static_dir: Option<PathBuf>,
}

impl ReviewState {
    pub fn new(
        tasks: Vec<ReviewTask>,
        generated: Vec<Utterance>,
        log: JudgmentLog,
        static_dir: Option<PathBuf>,
    ) -> intent_augment::Result<Arc<Self>> {
        let mut by_id = BTreeMap::new();
        for (i, t) in tasks.iter().enumerate() {
            if by_id.insert(t.task_id.clone(), i).is_some() {
                return Err(Error::Review(format!("duplicate task id `{}`", t.task_id)));
            }
        }
        for j in log.judgments() {
            if !by_id.contains_key(&j.task_id) {
                return Err(Error::Review(format!(
                    "log references unknown task `{}`",
                    j.task_id
                )));
            }
        }
        Ok(Arc::new(Self {
            tasks: Arc::new(tasks),
            by_id,
            generated: Arc::new(generated),
            log: Mutex::new(log),
            leases: Mutex::new(BTreeMap::new()),
            static_dir,
        }))
    }

    fn judgments(&self) -> Vec<Judgment> {
        self.log.lock().expect("log lock").judgments().to_vec()
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

fn internal(e: Error) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: Option<String>,
}

#[derive(Serialize)]
struct NextResponse<'a> {
    task: Option<&'a ReviewTask>,
    remaining: usize,
}

async fn next_task(
    State(state): State<Arc<ReviewState>>,
    Query(q): Query<NextQuery>,
) -> Result<Response, ApiError> {
    let annotator = q
        .annotator
        .filter(|a| !a.trim().is_empty())
        .ok_or_else(|| ApiError(StatusCode::BAD_REQUEST, "missing `annotator`".into()))?;
    let judgments = state.judgments();
    let judged: BTreeSet<&str> = judgments.iter().map(|j| j.task_id.as_str()).collect();
    let remaining = state.tasks.len() - judged.len();
    let mut leases = state.leases.lock().expect("lease lock");
    // Re-offer this annotator's outstanding task first.
    if let Some(id) = leases.get(&annotator) {
        if !judged.contains(id.as_str()) {
            let task = &state.tasks[state.by_id[id]];
            return Ok(Json(NextResponse { task: Some(task), remaining }).into_response());
        }
    }
    let others: BTreeSet<String> = leases
        .iter()
        .filter(|(a, _)| **a != annotator)
        .map(|(_, t)| t.clone())
        .collect();
    let task = review::next_task(&state.tasks, &judgments, &others);
    match task {
        Some(t) => {
            leases.insert(annotator, t.task_id.clone());
        }
        None => {
            leases.remove(&annotator);
        }
    }
    Ok(Json(NextResponse { task, remaining }).into_response())
}

#[derive(Deserialize)]
struct JudgmentRequest {
    task_id: String,
    annotator_id: String,
    answer: Answer,
}

async fn post_judgment(
    State(state): State<Arc<ReviewState>>,
    Json(req): Json<JudgmentRequest>,
) -> Result<Response, ApiError> {
    let index = *state
        .by_id
        .get(&req.task_id)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown task `{}`", req.task_id)))?;
    let task = &state.tasks[index];
    let timestamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let judgment = Judgment {
        task_id: req.task_id.clone(),
        annotator_id: req.annotator_id.clone(),
        answer: req.answer,
        timestamp,
    };
    {
        let mut log = state.log.lock().expect("log lock");
        if log.has(&req.task_id, &req.annotator_id) {
            return Err(ApiError(
                StatusCode::CONFLICT,
                format!("task `{}` already judged by `{}`", req.task_id, req.annotator_id),
            ));
        }
        log.append(task, judgment).map_err(|e| match e.root() {
            Error::Review(m) => ApiError(StatusCode::BAD_REQUEST, m.clone()),
            _ => internal(e),
        })?;
    }
    let mut leases = state.leases.lock().expect("lease lock");
    if leases.get(&req.annotator_id) == Some(&req.task_id) {
        leases.remove(&req.annotator_id);
    }
    Ok((
        StatusCode::CREATED,
        Json(serde_json::json!({ "task_id": req.task_id, "accepted": true })),
    )
        .into_response())
}

async fn stats(State(state): State<Arc<ReviewState>>) -> Result<Json<ReviewStats>, ApiError> {
    review::review_stats(&state.tasks, &state.judgments())
        .map(Json)
        .map_err(internal)
}

#[derive(Serialize)]
struct ExportResponse {
    count: usize,
    utterances: Vec<GeneratedRecord>,
}

async fn export(State(state): State<Arc<ReviewState>>) -> Result<Json<ExportResponse>, ApiError> {
    let utterances = review::export_relabelled(&state.tasks, &state.judgments(), &state.generated)
        .map_err(internal)?;
    Ok(Json(ExportResponse {
        count: utterances.len(),
        utterances: utterances.iter().map(GeneratedRecord::from_utterance).collect(),
    }))
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") | Some("mjs") => "text/javascript; charset=utf-8",
        Some("css") => "text/css; charset=utf-8",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        Some("ico") => "image/x-icon",
        _ => "application/octet-stream",
    }
}

async fn static_asset(State(state): State<Arc<ReviewState>>, uri: Uri) -> Response {
    let rel = uri.path().trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    let rel_path = Path::new(rel);
    if rel_path.components().any(|c| !matches!(c, Component::Normal(_))) {
        return StatusCode::NOT_FOUND.into_response();
    }
    match &state.static_dir {
        Some(dir) => match tokio::fs::read(dir.join(rel_path)).await {
            Ok(bytes) => ([(header::CONTENT_TYPE, content_type(rel_path))], bytes).into_response(),
            Err(_) => StatusCode::NOT_FOUND.into_response(),
        },
        None if rel == "index.html" => (
            [(header::CONTENT_TYPE, "text/html; charset=utf-8")],
            FALLBACK_INDEX,
        )
            .into_response(),
        None => StatusCode::NOT_FOUND.into_response(),
    }
}

pub fn router(state: Arc<ReviewState>) -> Router {
    Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/judgments", post(post_judgment))
        .route("/api/stats", get(stats))
        .route("/api/export", get(export))
        .fallback(get(static_asset))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, state: Arc<ReviewState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("review server listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

//! HTTP session service.
//!
//! ```text
//! POST /sessions                 {"clip_id": ..}   -> 201 session view
//! POST /sessions/{id}/questions  {"text": ..}      -> 200 answer view
//! GET  /sessions/{id}                              -> 200 session view
//! GET  /clips                                      -> 200 clip list
//! ```
//!
//! Errors come back as `{"error": {"code", "message", "limit"?}}`. Questions
//! to one session queue on a fair mutex, so they run in arrival order.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use anyhow::Context;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use hear_core::data::tokenize;
use hear_core::sal::GatingMode;
use hear_core::session::{DialogueEngine, RoundRecord, Session};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ApiErrorBody {
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ApiErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, body: ApiErrorBody { code: code.into(), message: message.into(), limit: None } }
    }

    fn internal(err: impl std::fmt::Display) -> Self {
        log::error!("request failed: {err}");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", err.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_body", r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.body }))).into_response()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub clip_id: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Question {
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RoundView {
    pub round: usize,
    pub question: String,
    pub answer: String,
    /// Estimator relatedness score.
    pub r: f64,
    pub keyword_hit: bool,
    pub gating_mode: GatingMode,
    /// Weights the fusion applied to each stream.
    pub audio_weight: f64,
    pub video_weight: f64,
    pub decode_ms: f64,
}

impl From<&RoundRecord> for RoundView {
    fn from(r: &RoundRecord) -> Self {
        let (audio_weight, video_weight) = match r.decision.mode {
            GatingMode::KeywordGate => (1.0, 0.0),
            GatingMode::EstimatorCalibrate => (r.decision.score, 1.0 - r.decision.score),
            GatingMode::None => (1.0, 1.0),
        };
        Self {
            round: r.round,
            question: r.question.clone(),
            answer: r.answer.clone(),
            r: r.decision.score,
            keyword_hit: r.decision.keyword_hit,
            gating_mode: r.decision.mode,
            audio_weight,
            video_weight,
            decode_ms: r.decode_ms,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SessionView {
    pub session_id: String,
    pub clip_id: String,
    pub history_window: usize,
    pub rounds: Vec<RoundView>,
    /// Rounds the next question will see as history.
    pub window: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnswerView {
    pub session_id: String,
    #[serde(flatten)]
    pub round: RoundView,
    pub window: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClipView {
    pub clip_id: String,
    pub caption: String,
    pub frames: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClipList {
    pub clips: Vec<ClipView>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

pub const EMPTY_CLIPS_MESSAGE: &str =
    "no clips loaded; generate a dataset with `hear synth-data --out <dir>`, train on it, then restart the service";

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum JournalEvent {
    SessionCreated { session_id: String, clip_id: String },
    Round { session_id: String, record: RoundRecord },
}

/// Append-only JSON-lines log of session events.
struct Journal {
    path: PathBuf,
    file: std::sync::Mutex<File>,
}

impl Journal {
    fn append(&self, event: &JournalEvent) -> anyhow::Result<()> {
        let mut line = serde_json::to_vec(event)?;
        line.push(b'\n');
        let mut f = self.file.lock().expect("journal lock poisoned");
        f.write_all(&line)?;
        f.flush()?;
        Ok(())
    }
}

fn replay(path: &Path, engine: &DialogueEngine) -> anyhow::Result<(HashMap<String, Session>, u64)> {
    let mut sessions: HashMap<String, Session> = HashMap::new();
    let mut max_id = 0;
    if !path.exists() {
        return Ok((sessions, 0));
    }
    let reader = BufReader::new(File::open(path).with_context(|| format!("opening journal {}", path.display()))?);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event: JournalEvent = match serde_json::from_str(&line) {
            Ok(e) => e,
            Err(e) => {
                // A torn final write; anything earlier is intact.
                log::warn!("journal {} line {}: {e}; ignoring the rest", path.display(), i + 1);
                break;
            }
        };
        match event {
            JournalEvent::SessionCreated { session_id, clip_id } => {
                if engine.clip(&clip_id).is_err() {
                    log::warn!("journal session {session_id} refers to unknown clip {clip_id}; skipped");
                    continue;
                }
                if let Some(n) = session_id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()) {
                    max_id = max_id.max(n);
                }
                sessions.insert(session_id.clone(), Session::new(session_id, clip_id));
            }
            JournalEvent::Round { session_id, record } => {
                if let Some(s) = sessions.get_mut(&session_id) {
                    s.rounds.push(record);
                }
            }
        }
    }
    Ok((sessions, max_id))
}

/// Shared state behind the router.
pub struct AppState {
    engine: Arc<DialogueEngine>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
    journal: Option<Journal>,
}

impl AppState {
    /// In-memory sessions, restored from and appended to `journal` if given.
    pub fn new(engine: DialogueEngine, journal: Option<&Path>) -> anyhow::Result<Self> {
        let (sessions, max_id, journal) = match journal {
            Some(path) => {
                let (sessions, max_id) = replay(path, &engine)?;
                if !sessions.is_empty() {
                    log::info!("restored {} sessions from {}", sessions.len(), path.display());
                }
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .with_context(|| format!("opening journal {}", path.display()))?;
                (sessions, max_id, Some(Journal { path: path.to_path_buf(), file: std::sync::Mutex::new(file) }))
            }
            None => (HashMap::new(), 0, None),
        };
        let sessions = sessions.into_iter().map(|(k, v)| (k, Arc::new(Mutex::new(v)))).collect();
        Ok(Self { engine: Arc::new(engine), sessions: RwLock::new(sessions), next_id: AtomicU64::new(max_id + 1), journal })
    }

    pub fn engine(&self) -> &DialogueEngine {
        &self.engine
    }

    pub fn journal_path(&self) -> Option<&Path> {
        self.journal.as_ref().map(|j| j.path.as_path())
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "session_not_found", format!("no session {id}")))
    }

    fn record(&self, event: JournalEvent) -> Result<(), ApiError> {
        match &self.journal {
            Some(j) => j.append(&event).map_err(ApiError::internal),
            None => Ok(()),
        }
    }

    fn view(&self, s: &Session) -> SessionView {
        let w = self.engine.history_window;
        SessionView {
            session_id: s.id.clone(),
            clip_id: s.clip_id.clone(),
            history_window: w,
            rounds: s.rounds.iter().map(RoundView::from).collect(),
            window: s.history(w).iter().map(|r| r.round).collect(),
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/clips", get(list_clips))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/questions", post(ask))
        .with_state(state)
}

async fn list_clips(State(state): State<Arc<AppState>>) -> Json<ClipList> {
    let clips: Vec<ClipView> = state
        .engine
        .clips
        .iter()
        .map(|(id, c)| ClipView { clip_id: id.clone(), caption: c.caption.clone(), frames: c.track.frames() })
        .collect();
    let message = clips.is_empty().then(|| EMPTY_CLIPS_MESSAGE.to_string());
    Json(ClipList { clips, message })
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let Json(req) = body?;
    if state.engine.clip(&req.clip_id).is_err() {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "clip_not_found", format!("no clip {}", req.clip_id)));
    }
    let id = format!("s{}", state.next_id.fetch_add(1, Ordering::Relaxed));
    let session = Session::new(id.clone(), req.clip_id.clone());
    state.record(JournalEvent::SessionCreated { session_id: id.clone(), clip_id: req.clip_id })?;
    let view = state.view(&session);
    state.sessions.write().expect("session map poisoned").insert(id, Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(view)))
}

async fn get_session(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionView>, ApiError> {
    let session = state.session(&id)?;
    let guard = session.lock().await;
    Ok(Json(state.view(&guard)))
}

async fn ask(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<Question>, JsonRejection>,
) -> Result<Json<AnswerView>, ApiError> {
    let session = state.session(&id)?;
    let Json(q) = body?;
    let tokens = tokenize(&q.text).len();
    if tokens == 0 {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "empty_question", "question has no tokens"));
    }
    let limit = state.engine.max_question_tokens;
    if tokens > limit {
        let mut e = ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "question_too_long",
            format!("question has {tokens} tokens, limit is {limit}"),
        );
        e.body.limit = Some(limit);
        return Err(e);
    }
    // Held across decoding: later questions to this session wait their turn.
    let mut guard = session.lock().await;
    let engine = Arc::clone(&state.engine);
    let mut working = guard.clone();
    let (working, result) = tokio::task::spawn_blocking(move || {
        let r = engine.ask(&mut working, &q.text);
        (working, r)
    })
    .await
    .map_err(ApiError::internal)?;
    let record = result.map_err(ApiError::internal)?;
    state.record(JournalEvent::Round { session_id: id.clone(), record: record.clone() })?;
    *guard = working;
    let window = guard.history(state.engine.history_window).iter().map(|r| r.round).collect();
    Ok(Json(AnswerView { session_id: id, round: RoundView::from(&record), window }))
}

/// Binds `addr` and serves until interrupted.
pub async fn serve(state: Arc<AppState>, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

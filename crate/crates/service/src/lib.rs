//! HTTP review service.
//!
//! A run pauses twice: once for code review and once for SQL approval.
//! Nothing reaches the database for execution before approval; SQL
//! generation probes only compile queries.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex, RwLock};

use epiquery::coding::ConceptMap;
use epiquery::pipeline::{Pipeline, PipelineConfig, PipelineRun, ProbeMode, RunStatus};
use epiquery::placeholder::{render_sql, PlaceholderKey, SqlTemplate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Generating,
    AwaitingCodeReview,
    AwaitingSqlApproval,
    Executing,
    Answered,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub phase: Phase,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeOverride {
    pub placeholder: PlaceholderKey,
    pub concept_ids: Vec<i64>,
    pub at: DateTime<Utc>,
}

/// Persisted state of one reviewed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub phase: Phase,
    pub transitions: Vec<Transition>,
    pub trace: PipelineRun,
    pub overrides: Vec<CodeOverride>,
    /// Codes that will be rendered: the automatic resolution plus overrides.
    pub approved_codes: Option<ConceptMap>,
    pub sql_preview: Option<String>,
    pub error: Option<String>,
}

impl RunRecord {
    fn new(run_id: String, trace: PipelineRun) -> Self {
        Self {
            run_id,
            phase: Phase::Generating,
            transitions: vec![Transition {
                phase: Phase::Generating,
                at: Utc::now(),
            }],
            trace,
            overrides: vec![],
            approved_codes: None,
            sql_preview: None,
            error: None,
        }
    }

    fn advance(&mut self, phase: Phase) {
        debug_assert!(phase == Phase::Failed || phase > self.phase);
        self.phase = phase;
        self.transitions.push(Transition { phase, at: Utc::now() });
    }

    fn fail(&mut self, message: impl Into<String>) {
        self.error = Some(message.into());
        self.advance(Phase::Failed);
    }
}

#[derive(Debug, Clone)]
pub struct ServiceOptions {
    pub runs_dir: PathBuf,
    pub auto_approve: bool,
    pub base_config: PipelineConfig,
    /// Required as `Authorization: Bearer <token>` when set.
    pub api_token: Option<String>,
    /// Built review UI assets served at `/`.
    pub static_dir: Option<PathBuf>,
}

type Slot = Arc<Mutex<RunRecord>>;

pub struct AppState {
    /// `None` when the model gateway could not be set up.
    pipeline: Option<Arc<Pipeline>>,
    runs: RwLock<HashMap<String, Slot>>,
    options: ServiceOptions,
}

impl AppState {
    /// Builds the state, reloading persisted runs from `options.runs_dir`.
    /// Runs caught mid-transition by a restart are marked failed.
    pub fn new(pipeline: Option<Arc<Pipeline>>, options: ServiceOptions) -> std::io::Result<Arc<Self>> {
        std::fs::create_dir_all(&options.runs_dir)?;
        let mut runs = HashMap::new();
        for entry in std::fs::read_dir(&options.runs_dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let Ok(mut rec) = serde_json::from_slice::<RunRecord>(&std::fs::read(&path)?) else {
                tracing::warn!(path = %path.display(), "skipping unreadable run record");
                continue;
            };
            if matches!(rec.phase, Phase::Generating | Phase::Executing) {
                rec.fail("interrupted by server restart");
                persist(&options.runs_dir, &rec)?;
            }
            runs.insert(rec.run_id.clone(), Arc::new(Mutex::new(rec)));
        }
        Ok(Arc::new(Self {
            pipeline,
            runs: RwLock::new(runs),
            options,
        }))
    }

    pub async fn phase_of(&self, run_id: &str) -> Option<Phase> {
        let slot = self.runs.read().await.get(run_id).cloned()?;
        let phase = slot.lock().await.phase;
        Some(phase)
    }
}

fn persist(dir: &Path, rec: &RunRecord) -> std::io::Result<()> {
    let path = dir.join(format!("{}.json", rec.run_id));
    let tmp = dir.join(format!("{}.json.tmp", rec.run_id));
    std::fs::write(&tmp, serde_json::to_vec_pretty(rec)?)?;
    std::fs::rename(tmp, path)
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

fn err(code: StatusCode, msg: impl Into<String>) -> ApiError {
    ApiError(code, msg.into())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub mode: Option<String>,
    pub max_repair_attempts: Option<u32>,
    pub tolerance: Option<f64>,
    pub n_candidates: Option<usize>,
}

#[derive(Debug, Deserialize)]
pub struct QuestionRequest {
    pub question: String,
    #[serde(default)]
    pub config: ConfigOverrides,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StatusBody {
    pub run_id: String,
    pub phase: Phase,
    pub transitions: Vec<Transition>,
    pub error: Option<String>,
}

impl From<&RunRecord> for StatusBody {
    fn from(r: &RunRecord) -> Self {
        Self {
            run_id: r.run_id.clone(),
            phase: r.phase,
            transitions: r.transitions.clone(),
            error: r.error.clone(),
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let mut app = Router::new()
        .route("/questions", post(submit_question))
        .route("/runs/:id", get(get_run))
        .route("/runs/:id/codes", post(post_codes))
        .route("/runs/:id/execute", post(post_execute))
        .route("/spec", get(openapi));
    if let Some(dir) = &state.options.static_dir {
        app = app.fallback_service(tower_http::services::ServeDir::new(dir));
    }
    app.layer(middleware::from_fn_with_state(state.clone(), auth)).with_state(state)
}

async fn auth(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.options.api_token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            == Some(token.as_str());
        if !ok && req.uri().path() != "/spec" {
            return err(StatusCode::UNAUTHORIZED, "missing or wrong API token").into_response();
        }
    }
    next.run(req).await
}

fn run_config(base: &PipelineConfig, o: &ConfigOverrides) -> Result<PipelineConfig, String> {
    let mut c = base.clone();
    if let Some(m) = &o.mode {
        c = c.with_mode(m).map_err(|e| e.to_string())?;
    }
    if let Some(n) = o.max_repair_attempts {
        c.max_repair_attempts = n;
    }
    if let Some(t) = o.tolerance {
        c.tolerance = t;
    }
    if let Some(n) = o.n_candidates {
        c.coding.n_candidates = n;
    }
    // Generation may compile but never run queries before approval.
    c.probe = ProbeMode::Compile;
    c.validate().map_err(|e| e.to_string())?;
    Ok(c)
}

async fn save(state: &AppState, rec: &RunRecord) -> Result<(), ApiError> {
    persist(&state.options.runs_dir, rec).map_err(|e| err(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

async fn submit_question(
    State(state): State<Arc<AppState>>,
    body: Result<Json<QuestionRequest>, axum::extract::rejection::JsonRejection>,
) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    let Json(req) = body.map_err(|e| err(StatusCode::BAD_REQUEST, e.body_text()))?;
    if req.question.trim().is_empty() {
        return Err(err(StatusCode::BAD_REQUEST, "question is empty"));
    }
    let config = run_config(&state.options.base_config, &req.config).map_err(|e| err(StatusCode::BAD_REQUEST, e))?;
    let pipeline = state
        .pipeline
        .clone()
        .ok_or_else(|| err(StatusCode::SERVICE_UNAVAILABLE, "model gateway unavailable"))?;

    let run_id = uuid::Uuid::new_v4().to_string();
    let mut trace = PipelineRun::new(&req.question, config.clone());
    trace.run_id = run_id.clone();
    let rec = RunRecord::new(run_id.clone(), trace);
    save(&state, &rec).await?;
    let slot = Arc::new(Mutex::new(rec));
    state.runs.write().await.insert(run_id.clone(), slot.clone());

    let st = state.clone();
    tokio::spawn(async move {
        let mut guard = slot.lock().await;
        let question = req.question.clone();
        let p = pipeline.clone();
        let prepared = tokio::task::spawn_blocking(move || p.prepare(&question, None, &config)).await;
        match prepared {
            Ok(mut run) => {
                run.run_id = guard.run_id.clone();
                let status = run.status;
                guard.trace = run;
                match status {
                    RunStatus::AwaitingApproval => guard.advance(Phase::AwaitingCodeReview),
                    _ => {
                        let msg = describe_failure(&guard.trace);
                        guard.fail(msg);
                    }
                }
            }
            Err(e) => guard.fail(format!("pipeline task panicked: {e}")),
        }
        let _ = persist(&st.options.runs_dir, &guard);
        if st.options.auto_approve && guard.phase == Phase::AwaitingCodeReview {
            if let Err(e) = approve_codes(&mut guard, BTreeMap::new()) {
                guard.fail(e.1);
            }
            let _ = persist(&st.options.runs_dir, &guard);
            if guard.phase == Phase::AwaitingSqlApproval {
                run_execution(&st, &pipeline, &mut guard).await;
            }
        }
    });
    Ok((StatusCode::ACCEPTED, Json(serde_json::json!({ "run_id": run_id }))))
}

fn describe_failure(run: &PipelineRun) -> String {
    match (&run.failure, &run.db_error) {
        (Some(f), _) => format!("{} stage: {}", f.stage, f.message),
        (None, Some(e)) => format!("not executable after {} repairs: {e}", run.repairs_used),
        _ => "run did not complete".into(),
    }
}

async fn slot(state: &AppState, id: &str) -> Result<Slot, ApiError> {
    state
        .runs
        .read()
        .await
        .get(id)
        .cloned()
        .ok_or_else(|| err(StatusCode::NOT_FOUND, format!("no run {id}")))
}

async fn get_run(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<RunRecord>, ApiError> {
    let s = slot(&state, &id).await?;
    // A run mid-transition holds its lock; report the last persisted state instead of waiting.
    if let Ok(guard) = s.try_lock() {
        return Ok(Json(guard.clone()));
    }
    let path = state.options.runs_dir.join(format!("{id}.json"));
    let bytes = std::fs::read(&path).map_err(|e| err(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    serde_json::from_slice(&bytes)
        .map(Json)
        .map_err(|e| err(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

fn approve_codes(rec: &mut RunRecord, overrides: BTreeMap<String, Vec<i64>>) -> Result<(), ApiError> {
    let mut codes = rec.trace.concepts.clone();
    let mut applied = Vec::new();
    for (key_text, ids) in overrides {
        let key: PlaceholderKey = key_text
            .parse()
            .map_err(|e| err(StatusCode::UNPROCESSABLE_ENTITY, format!("placeholder `{key_text}`: {e}")))?;
        let set = codes
            .get_mut(&key)
            .ok_or_else(|| err(StatusCode::UNPROCESSABLE_ENTITY, format!("run has no placeholder {key}")))?;
        if ids.is_empty() {
            return Err(err(StatusCode::UNPROCESSABLE_ENTITY, format!("{key}: at least one concept is required")));
        }
        set.override_with(&ids).map_err(|bad| {
            err(
                StatusCode::UNPROCESSABLE_ENTITY,
                format!("{key}: concept {bad} is not among the candidates"),
            )
        })?;
        applied.push(CodeOverride {
            placeholder: key,
            concept_ids: set.concept_ids.clone(),
            at: Utc::now(),
        });
    }
    let template = rec
        .trace
        .sql_template
        .as_deref()
        .ok_or_else(|| err(StatusCode::CONFLICT, "run has no SQL template"))?;
    let preview = SqlTemplate::parse(template)
        .map_err(|e| e.to_string())
        .and_then(|t| render_sql(&t, &codes).map_err(|e| e.to_string()))
        .map_err(|e| err(StatusCode::UNPROCESSABLE_ENTITY, e))?;
    rec.overrides.extend(applied);
    rec.approved_codes = Some(codes);
    rec.sql_preview = Some(preview);
    rec.advance(Phase::AwaitingSqlApproval);
    Ok(())
}

async fn post_codes(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: axum::body::Bytes,
) -> Result<Json<StatusBody>, ApiError> {
    let overrides: BTreeMap<String, Vec<i64>> = if body.iter().all(u8::is_ascii_whitespace) {
        BTreeMap::new()
    } else {
        serde_json::from_slice(&body).map_err(|e| err(StatusCode::BAD_REQUEST, e.to_string()))?
    };
    let s = slot(&state, &id).await?;
    let mut rec = s
        .try_lock()
        .map_err(|_| err(StatusCode::CONFLICT, "run is busy"))?;
    if rec.phase != Phase::AwaitingCodeReview {
        return Err(err(StatusCode::CONFLICT, format!("run is {:?}", rec.phase)));
    }
    approve_codes(&mut rec, overrides)?;
    save(&state, &rec).await?;
    Ok(Json(StatusBody::from(&*rec)))
}

async fn run_execution(state: &AppState, pipeline: &Arc<Pipeline>, rec: &mut RunRecord) {
    rec.advance(Phase::Executing);
    let _ = persist(&state.options.runs_dir, rec);
    let mut trace = rec.trace.clone();
    let codes = rec.approved_codes.clone().unwrap_or_else(|| trace.concepts.clone());
    let p = pipeline.clone();
    let done = tokio::task::spawn_blocking(move || {
        p.execute_with(&mut trace, &codes);
        trace
    })
    .await;
    match done {
        Ok(trace) => {
            rec.trace = trace;
            if rec.trace.status == RunStatus::Completed {
                rec.advance(Phase::Answered);
            } else {
                let msg = describe_failure(&rec.trace);
                rec.fail(msg);
            }
        }
        Err(e) => rec.fail(format!("execution task panicked: {e}")),
    }
    let _ = persist(&state.options.runs_dir, rec);
}

async fn post_execute(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<StatusBody>, ApiError> {
    let s = slot(&state, &id).await?;
    let mut rec = s
        .try_lock()
        .map_err(|_| err(StatusCode::CONFLICT, "run is busy"))?;
    if rec.phase != Phase::AwaitingSqlApproval {
        return Err(err(StatusCode::CONFLICT, format!("run is {:?}", rec.phase)));
    }
    let pipeline = state
        .pipeline
        .clone()
        .ok_or_else(|| err(StatusCode::SERVICE_UNAVAILABLE, "model gateway unavailable"))?;
    run_execution(&state, &pipeline, &mut rec).await;
    Ok(Json(StatusBody::from(&*rec)))
}

async fn openapi() -> impl IntoResponse {
    (
        [(header::CONTENT_TYPE, "application/json")],
        include_str!("../openapi.json"),
    )
}

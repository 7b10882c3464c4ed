//! Shared pieces of the `sssd` binary: exit codes, the report cache and the HTTP API.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sssd_core::report::{
    design_report, engine_version, validate_report, DesignReport, ResolvedConfig, RunConfig, ValidationReport,
};
use sssd_core::{ErrorCode, SssdError};

pub const CACHE_ENV: &str = "SSSD_CACHE_DIR";
pub const DEFAULT_PERCENTILES: [f64; 3] = [0.25, 0.5, 0.9];

pub mod exit {
    pub const OK: i32 = 0;
    pub const IO: i32 = 1;
    pub const CONFIGURATION: i32 = 2;
    pub const UNATTAINABLE: i32 = 3;
    pub const DEGENERACY: i32 = 4;
    pub const SMALL_SAMPLE: i32 = 5;
    pub const NUMERICAL: i32 = 6;
}

pub fn exit_code_for(code: ErrorCode) -> i32 {
    match code {
        ErrorCode::Configuration => exit::CONFIGURATION,
        ErrorCode::UnattainableDesign => exit::UNATTAINABLE,
        ErrorCode::Degeneracy => exit::DEGENERACY,
        ErrorCode::SmallSample => exit::SMALL_SAMPLE,
        ErrorCode::Numerical => exit::NUMERICAL,
    }
}

/// Engine errors map to their category; anything else is an I/O failure.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    err.chain().find_map(|e| e.downcast_ref::<SssdError>()).map_or(exit::IO, |e| exit_code_for(e.code()))
}

/// Hex SHA-256 of the engine version and the canonical JSON of a resolved config.
pub fn config_hash(cfg: &ResolvedConfig) -> String {
    let mut h = Sha256::new();
    h.update(engine_version().as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(cfg).expect("config is serializable"));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Write-once report store keyed by [`config_hash`].
#[derive(Debug, Clone, Default)]
pub struct Cache {
    dir: Option<PathBuf>,
}

impl Cache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Cache { dir }
    }

    pub fn from_env() -> Self {
        Cache::new(std::env::var_os(CACHE_ENV).map(PathBuf::from))
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        std::fs::read_to_string(self.path(key)?).ok()
    }

    pub fn put(&self, key: &str, text: &str) -> anyhow::Result<()> {
        let Some(path) = self.path(key) else { return Ok(()) };
        if path.exists() {
            return Ok(());
        }
        let dir = path.parent().expect("cache file has a directory");
        std::fs::create_dir_all(dir).with_context(|| format!("creating cache directory {}", dir.display()))?;
        let tmp = dir.join(format!(".{key}.{}.tmp", std::process::id()));
        std::fs::write(&tmp, text).with_context(|| format!("writing {}", tmp.display()))?;
        // rename is atomic, so concurrent writers of the same key are harmless
        std::fs::rename(&tmp, &path).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

pub struct DesignOutput {
    pub text: String,
    pub cache_hit: bool,
    pub key: String,
    pub timings: Option<sssd_core::report::Timings>,
}

/// Report text for a resolved config, from the cache when possible. Timings never enter
/// the report text, so cached and fresh outputs are identical.
pub fn design_text(cfg: &ResolvedConfig, cache: &Cache) -> anyhow::Result<DesignOutput> {
    let key = config_hash(cfg);
    if let Some(text) = cache.get(&key) {
        return Ok(DesignOutput { text, cache_hit: true, key, timings: None });
    }
    let mut report = design_report(cfg, true)?;
    let timings = report.timings.take();
    let text = report.to_text();
    cache.put(&key, &text)?;
    Ok(DesignOutput { text, cache_hit: false, key, timings })
}

pub fn read_config(path: &Path, seed: Option<u64>) -> anyhow::Result<ResolvedConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut cfg = RunConfig::from_json(&text)?;
    if seed.is_some() {
        cfg.seed = seed;
    }
    Ok(cfg.resolve()?)
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line: Option<u8>,
}

impl ErrorBody {
    pub fn from_engine(e: &SssdError) -> Self {
        let field = match e.root() {
            SssdError::Config { field, .. } => Some(field.clone()),
            _ => None,
        };
        ErrorBody { code: e.code().as_str().into(), message: e.to_string(), field, line: e.line() }
    }
}

fn error_response(status: StatusCode, body: ErrorBody) -> Response {
    (status, Json(serde_json::json!({ "error": body }))).into_response()
}

fn engine_error(e: &SssdError) -> Response {
    let status =
        if e.code() == ErrorCode::Configuration { StatusCode::BAD_REQUEST } else { StatusCode::UNPROCESSABLE_ENTITY };
    error_response(status, ErrorBody::from_engine(e))
}

fn internal_error(e: anyhow::Error) -> Response {
    match e.chain().find_map(|c| c.downcast_ref::<SssdError>()) {
        Some(se) => engine_error(se),
        None => error_response(
            StatusCode::INTERNAL_SERVER_ERROR,
            ErrorBody { code: "io".into(), message: format!("{e:#}"), field: None, line: None },
        ),
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum JobStatus {
    Running,
    Done { result: ValidationReport },
    Failed { error: ErrorBody },
}

#[derive(Default)]
pub struct AppState {
    pub cache: Cache,
    jobs: Mutex<HashMap<u64, JobStatus>>,
    next_job: AtomicU64,
}

impl AppState {
    pub fn new(cache: Cache) -> Arc<Self> {
        Arc::new(AppState { cache, ..Default::default() })
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateRequest {
    pub config: serde_json::Value,
    #[serde(default)]
    pub reps: Option<usize>,
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default)]
    pub percentiles: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: Option<u64>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/design", post(design))
        .route("/api/validate", post(validate))
        .route("/api/jobs/{id}", get(job))
        .with_state(state)
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "engine": engine_version() }))
}

fn parse_config(body: &[u8]) -> Result<ResolvedConfig, Response> {
    let text = std::str::from_utf8(body).map_err(|_| {
        error_response(
            StatusCode::BAD_REQUEST,
            ErrorBody { code: "configuration".into(), message: "body is not UTF-8".into(), field: None, line: None },
        )
    })?;
    RunConfig::from_json(text).and_then(|c| c.resolve()).map_err(|e| engine_error(&e))
}

async fn design(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let cfg = match parse_config(&body) {
        Ok(c) => c,
        Err(r) => return r,
    };
    let cache = state.cache.clone();
    let out = match tokio::task::spawn_blocking(move || design_text(&cfg, &cache)).await {
        Ok(Ok(out)) => out,
        Ok(Err(e)) => return internal_error(e),
        Err(e) => return internal_error(e.into()),
    };
    let mut resp = (StatusCode::OK, out.text).into_response();
    let h = resp.headers_mut();
    h.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/json"));
    h.insert("x-sssd-cache", HeaderValue::from_static(if out.cache_hit { "hit" } else { "miss" }));
    h.insert("x-sssd-config-hash", HeaderValue::from_str(&out.key).expect("hex is a valid header"));
    if let Some(t) = out.timings {
        let v = format!("stage_one={:.1};stage_two={:.1}", t.stage_one_ms, t.stage_two_ms);
        h.insert("x-sssd-timings-ms", HeaderValue::from_str(&v).expect("ascii header"));
    }
    resp
}

async fn validate(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: ValidateRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return engine_error(&SssdError::config("body", e.to_string())),
    };
    let cfg = match parse_config(req.config.to_string().as_bytes()) {
        Ok(c) => c,
        Err(r) => return r,
    };
    let id = state.next_job.fetch_add(1, Ordering::Relaxed) + 1;
    state.jobs.lock().expect("job table").insert(id, JobStatus::Running);
    let worker = state.clone();
    tokio::task::spawn_blocking(move || {
        let result = design_text(&cfg, &worker.cache)
            .and_then(|out| Ok(DesignReport::from_text(&out.text)?))
            .and_then(|report| run_validation(&report, &req));
        let status = match result {
            Ok(result) => JobStatus::Done { result },
            Err(e) => JobStatus::Failed {
                error: match e.chain().find_map(|c| c.downcast_ref::<SssdError>()) {
                    Some(se) => ErrorBody::from_engine(se),
                    None => ErrorBody { code: "io".into(), message: format!("{e:#}"), field: None, line: None },
                },
            },
        };
        worker.jobs.lock().expect("job table").insert(id, status);
    });
    (StatusCode::ACCEPTED, Json(serde_json::json!({ "job_id": id.to_string() }))).into_response()
}

pub fn run_validation(report: &DesignReport, req: &ValidateRequest) -> anyhow::Result<ValidationReport> {
    let cfg = &report.config;
    let percentiles = req.percentiles.clone().unwrap_or_else(|| DEFAULT_PERCENTILES.to_vec());
    Ok(validate_report(
        report,
        &percentiles,
        req.reps.unwrap_or(cfg.oracle.reps),
        req.m.unwrap_or(cfg.oracle.m),
        req.seed.unwrap_or(cfg.seed),
    )?)
}

async fn job(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    let status = id.parse::<u64>().ok().and_then(|k| state.jobs.lock().expect("job table").get(&k).cloned());
    match status {
        Some(s) => Json(s).into_response(),
        None => error_response(
            StatusCode::NOT_FOUND,
            ErrorBody { code: "not_found".into(), message: format!("no job {id}"), field: None, line: None },
        ),
    }
}

pub async fn serve(port: u16, cache: Cache) -> anyhow::Result<()> {
    let listener =
        tokio::net::TcpListener::bind(("0.0.0.0", port)).await.with_context(|| format!("binding port {port}"))?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(cache)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

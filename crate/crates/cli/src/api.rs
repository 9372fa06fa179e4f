//! HTTP endpoints.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use winsketch::query::IngestStatus;
use winsketch::{DataSample, Engine, Error, RuleSpec, SampleValue, SeriesId};

use crate::scheduler::Scheduler;

pub struct AppState {
    pub engine: Arc<Engine>,
    pub scheduler: Scheduler,
    pub snapshot_path: Option<PathBuf>,
}

pub type Shared = Arc<AppState>;

/// Large enough for ingest batches of ~100K samples.
pub const MAX_BODY_BYTES: usize = 64 << 20;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/v1/ingest", post(ingest))
        .route("/api/v1/query", get(query))
        .route("/api/v1/rules", post(add_rule).get(list_rules))
        .route("/api/v1/rules/{id}", delete(remove_rule))
        .route("/api/v1/stats", get(stats))
        .route("/api/v1/alerts", get(alerts))
        .route("/api/v1/snapshot", post(snapshot))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::UnsupportedFunction(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::UnknownRule(_) => StatusCode::NOT_FOUND,
            Error::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError(code, e.to_string())
    }
}

fn bad_request(msg: impl ToString) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.to_string())
}

fn json_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| bad_request(format!("malformed body: {e}")))
}

/// Ingest wire format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireSample {
    pub metric: String,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
    pub timestamp_ms: i64,
    pub value: SampleValue,
}

impl WireSample {
    pub fn into_sample(self) -> winsketch::Result<DataSample> {
        let id = SeriesId::canonicalize(self.metric, self.labels)?;
        DataSample::new(id, self.timestamp_ms, self.value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStatus {
    Accepted,
    OutOfOrder,
    Duplicate,
    Invalid,
}

impl From<IngestStatus> for SampleStatus {
    fn from(s: IngestStatus) -> Self {
        match s {
            IngestStatus::Accepted => SampleStatus::Accepted,
            IngestStatus::OutOfOrder => SampleStatus::OutOfOrder,
            IngestStatus::Duplicate => SampleStatus::Duplicate,
        }
    }
}

async fn ingest(State(st): State<Shared>, body: Bytes) -> Result<Json<serde_json::Value>, ApiError> {
    let batch: Vec<WireSample> = json_body(&body)?;
    let engine = st.engine.clone();
    let statuses = tokio::task::spawn_blocking(move || {
        batch
            .into_iter()
            .map(|w| match w.into_sample() {
                Ok(s) => engine
                    .ingest(&s)
                    .map(SampleStatus::from)
                    .unwrap_or(SampleStatus::Invalid),
                Err(_) => SampleStatus::Invalid,
            })
            .collect::<Vec<_>>()
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let accepted = statuses.iter().filter(|s| **s == SampleStatus::Accepted).count();
    Ok(Json(json!({ "accepted": accepted, "statuses": statuses })))
}

#[derive(Debug, Deserialize)]
struct QueryParams {
    query: String,
    /// Evaluation time in ms; defaults to the newest ingested timestamp.
    time: Option<i64>,
    /// Set to false to bypass the cache.
    cache: Option<bool>,
}

async fn query(State(st): State<Shared>, Query(p): Query<QueryParams>) -> Result<Json<serde_json::Value>, ApiError> {
    let expr = winsketch::parse(&p.query)?;
    let at = p.time.unwrap_or_else(|| st.engine.newest_ts().unwrap_or(0).max(0));
    let use_cache = p.cache.unwrap_or(true);
    let engine = st.engine.clone();
    let r = tokio::task::spawn_blocking(move || engine.evaluate_with(&expr, at, use_cache))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(json!({
        "time": at,
        "window": r.window,
        "source": r.source,
        "error_annotation": r.error_annotation,
        "series": r.series,
    })))
}

async fn add_rule(State(st): State<Shared>, body: Bytes) -> Result<Json<serde_json::Value>, ApiError> {
    let spec: RuleSpec = json_body(&body)?;
    let covered = st.engine.register_rule(spec.clone())?;
    let instances: Vec<_> = covered
        .iter()
        .map(|(s, f)| json!({ "series": s.to_string(), "family": f }))
        .collect();
    let id = spec.id.clone();
    st.scheduler.schedule(spec);
    Ok(Json(json!({ "id": id, "instances": instances })))
}

async fn list_rules(State(st): State<Shared>) -> Json<serde_json::Value> {
    let status = st.scheduler.status();
    let rules: Vec<_> = st
        .engine
        .cache()
        .rules()
        .into_iter()
        .map(|r| {
            let s = status.get(&r.id).cloned().unwrap_or_default();
            json!({ "rule": r, "status": s })
        })
        .collect();
    Json(json!({ "rules": rules }))
}

async fn remove_rule(State(st): State<Shared>, Path(id): Path<String>) -> Result<Json<serde_json::Value>, ApiError> {
    let destroyed = st.engine.unregister_rule(&id)?;
    st.scheduler.cancel(&id);
    Ok(Json(json!({ "id": id, "destroyed": destroyed })))
}

async fn stats(State(st): State<Shared>) -> Json<serde_json::Value> {
    let e = &st.engine;
    Json(json!({
        "cache": e.cache().stats(),
        "exact_series": e.exact().series_count(),
        "exact_samples": e.exact().sample_count(),
        "exact_retention_ms": e.exact().retention(),
        "newest_ts": e.newest_ts(),
    }))
}

async fn alerts(State(st): State<Shared>) -> Json<serde_json::Value> {
    Json(json!({ "alerts": st.scheduler.alerts() }))
}

async fn snapshot(State(st): State<Shared>) -> Result<Json<serde_json::Value>, ApiError> {
    let path = st
        .snapshot_path
        .clone()
        .ok_or_else(|| bad_request("no snapshot_path configured"))?;
    let bytes = write_snapshot(&st.engine, &path)?;
    Ok(Json(json!({ "path": path, "bytes": bytes })))
}

/// Write the cache to `path` through a temporary file; returns the size.
pub fn write_snapshot(engine: &Engine, path: &std::path::Path) -> Result<u64, ApiError> {
    let io = |e: std::io::Error| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
    let tmp = path.with_extension("tmp");
    let f = std::fs::File::create(&tmp).map_err(io)?;
    let mut w = std::io::BufWriter::new(f);
    engine.cache().write_snapshot(&mut w)?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(io)?;
    Ok(std::fs::metadata(path).map_err(io)?.len())
}

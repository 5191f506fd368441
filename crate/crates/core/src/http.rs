//! JSON API and server-sent event feed for the dashboard.
//!
//! All bodies are JSON with snake_case fields and ISO-8601 UTC timestamps.
//! Errors are `{"code": ..., "message": ..., "field": ...}` with `field`
//! present on validation failures.

use std::convert::Infallible;
use std::path::PathBuf;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use chrono::{DateTime, TimeZone, Utc};
use futures::stream::{self, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::broadcast;
use tower_http::services::{ServeDir, ServeFile};

use crate::gateway::{CounterSnapshot, Event, Gateway, GatewayError};
use crate::model::{iso_ms, AlertState, VitalThresholds};
use crate::store::{SeriesQuery, StoreError};
use crate::wire::Metric;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ApiErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ApiErrorBody {
                code: code.into(),
                message: message.into(),
                field: None,
            },
        }
    }

    fn invalid(field: &str, message: impl Into<String>) -> Self {
        let mut e = Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation_failed", message);
        e.body.field = Some(field.into());
        e
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::NotFound { .. } => ApiError::not_found(e.to_string()),
            GatewayError::Conflict(t) => ApiError::new(StatusCode::CONFLICT, "illegal_transition", t.to_string()),
            GatewayError::Validation(v) => ApiError::invalid(&v.field, v.message),
            GatewayError::Store(StoreError::UnknownPatient(id)) => {
                ApiError::not_found(format!("patient {id} not found"))
            }
            GatewayError::Store(StoreError::InvalidQuery(m)) => {
                let field = if m.starts_with("max_points") { "max_points" } else { "from" };
                ApiError::invalid(field, m)
            }
            GatewayError::Store(e) => {
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage_error", e.to_string())
            }
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone)]
struct AppState {
    gw: Gateway,
}

/// Builds the router. `static_dir`, when given, is served at `/` with
/// `index.html` as the fallback; otherwise a small built-in page is served.
pub fn router(gw: Gateway, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/patients", get(list_patients))
        .route("/patients/{id}", get(get_patient))
        .route("/patients/{id}/latest", get(latest))
        .route("/patients/{id}/series", get(series))
        .route("/patients/{id}/thresholds", put(put_thresholds))
        .route("/alerts", get(list_alerts))
        .route("/alerts/{id}", get(get_alert))
        .route("/alerts/{id}/ack", post(ack_alert))
        .route("/stream", get(stream))
        .route("/status", get(status))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .method_not_allowed_fallback(|| async {
            ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed", "method not allowed")
        });
    let app = Router::new().nest("/api", api).with_state(AppState { gw });
    match static_dir {
        Some(dir) => {
            let index = dir.join("index.html");
            app.fallback_service(ServeDir::new(dir).fallback(ServeFile::new(index)))
        }
        None => app.route("/", get(|| async { Html(BUILTIN_PAGE) })),
    }
}

pub async fn serve(listener: TcpListener, router: Router) -> std::io::Result<()> {
    axum::serve(listener, router).await
}

fn parse_id<T: std::str::FromStr>(raw: &str, what: &str) -> ApiResult<T> {
    raw.parse()
        .map_err(|_| ApiError::not_found(format!("{what} {raw} not found")))
}

async fn list_patients(State(s): State<AppState>) -> Json<Vec<crate::model::Patient>> {
    Json(s.gw.patients())
}

async fn get_patient(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let id: u16 = parse_id(&id, "patient")?;
    s.gw
        .patient(id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("patient {id} not found")))
}

async fn latest(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let id: u16 = parse_id(&id, "patient")?;
    Ok(Json(s.gw.latest(id)?))
}

#[derive(Deserialize)]
struct SeriesParams {
    metric: Option<String>,
    from: Option<String>,
    to: Option<String>,
    max_points: Option<String>,
}

/// Window used when `from` / `to` are omitted.
pub fn default_window() -> (DateTime<Utc>, DateTime<Utc>) {
    (
        DateTime::UNIX_EPOCH,
        Utc.with_ymd_and_hms(9999, 12, 31, 23, 59, 59).unwrap(),
    )
}

fn parse_time(raw: &Option<String>, field: &str, default: DateTime<Utc>) -> ApiResult<DateTime<Utc>> {
    match raw {
        None => Ok(default),
        Some(v) => iso_ms::parse(v)
            .map_err(|e| ApiError::invalid(field, format!("`{v}` is not an ISO-8601 timestamp: {e}"))),
    }
}

async fn series(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(p): Query<SeriesParams>,
) -> ApiResult<Response> {
    let id: u16 = parse_id(&id, "patient")?;
    let metric: Metric = match &p.metric {
        None => return Err(ApiError::invalid("metric", "metric is required")),
        Some(m) => m
            .parse()
            .map_err(|_| ApiError::invalid("metric", format!("unknown metric `{m}`")))?,
    };
    let (dfrom, dto) = default_window();
    let from = parse_time(&p.from, "from", dfrom)?;
    let to = parse_time(&p.to, "to", dto)?;
    let max_points = match &p.max_points {
        None => None,
        Some(v) => Some(
            v.parse::<usize>()
                .map_err(|_| ApiError::invalid("max_points", format!("`{v}` is not a positive integer")))?,
        ),
    };
    let points = s.gw.query_series(&SeriesQuery {
        patient_id: id,
        metric,
        from,
        to,
        max_points,
    })?;
    Ok(Json(points).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ThresholdsBody {
    metric: Option<Metric>,
    low: f64,
    high: f64,
    debounce_window_s: Option<f64>,
    resolve_after: Option<u32>,
}

#[derive(Deserialize)]
struct ThresholdsParams {
    metric: Option<String>,
}

fn json_error(e: &serde_json::Error) -> ApiError {
    let msg = e.to_string();
    let field = msg
        .split('`')
        .nth(1)
        .filter(|_| msg.contains("field `"))
        .unwrap_or("body")
        .to_string();
    ApiError::invalid(&field, msg)
}

async fn put_thresholds(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<ThresholdsParams>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let id: u16 = parse_id(&id, "patient")?;
    let b: ThresholdsBody = serde_json::from_slice(&body).map_err(|e| json_error(&e))?;
    let metric = match (b.metric, &q.metric) {
        (Some(m), _) => m,
        (None, Some(m)) => m
            .parse()
            .map_err(|_| ApiError::invalid("metric", format!("unknown metric `{m}`")))?,
        (None, None) => Metric::Temperature,
    };
    let patient = s
        .gw
        .patient(id)
        .ok_or_else(|| ApiError::not_found(format!("patient {id} not found")))?;
    let mut t = patient
        .thresholds
        .get(&metric)
        .cloned()
        .unwrap_or_else(|| VitalThresholds::new(metric, b.low, b.high));
    t.low = b.low;
    t.high = b.high;
    if let Some(d) = b.debounce_window_s {
        t.debounce_window_s = d;
    }
    if let Some(r) = b.resolve_after {
        t.resolve_after = r;
    }
    Ok(Json(s.gw.set_thresholds(id, t)?))
}

#[derive(Deserialize)]
struct AlertParams {
    state: Option<String>,
}

async fn list_alerts(State(s): State<AppState>, Query(p): Query<AlertParams>) -> ApiResult<impl IntoResponse> {
    let state = match &p.state {
        None => None,
        Some(v) => Some(v.parse::<AlertState>().map_err(|m| ApiError::invalid("state", m))?),
    };
    Ok(Json(s.gw.alerts(state)))
}

async fn get_alert(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let id: u64 = parse_id(&id, "alert")?;
    s.gw
        .alert(id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("alert {id} not found")))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct AckBody {
    operator: Option<String>,
}

async fn ack_alert(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let id: u64 = parse_id(&id, "alert")?;
    let b: AckBody = if body.iter().all(u8::is_ascii_whitespace) {
        AckBody::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| json_error(&e))?
    };
    let operator = b.operator.unwrap_or_else(|| "operator".to_string());
    Ok(Json(s.gw.acknowledge(id, &operator)?))
}

#[derive(Serialize)]
struct Status {
    readings: usize,
    #[serde(flatten)]
    counters: CounterSnapshot,
}

async fn status(State(s): State<AppState>) -> Json<Status> {
    Json(Status {
        readings: s.gw.reading_count(),
        counters: s.gw.counters(),
    })
}

#[derive(Deserialize)]
struct StreamParams {
    after: Option<String>,
}

/// SSE message for one gateway event. Reading events carry their store
/// position as the event id so clients can resume with `Last-Event-ID`.
pub fn sse_event(e: &Event) -> SseEvent {
    match e {
        Event::Reading { position, .. } => SseEvent::default()
            .event("reading")
            .id(position.to_string())
            .data(serde_json::to_string(e).expect("event serializes")),
        Event::Alert { .. } => SseEvent::default()
            .event("alert")
            .data(serde_json::to_string(e).expect("event serializes")),
    }
}

async fn stream(
    State(s): State<AppState>,
    headers: HeaderMap,
    Query(p): Query<StreamParams>,
) -> ApiResult<Sse<impl Stream<Item = Result<SseEvent, Infallible>>>> {
    let after = match p.after {
        Some(v) => Some(
            v.parse::<u64>()
                .map_err(|_| ApiError::invalid("after", format!("`{v}` is not a stream position")))?,
        ),
        None => headers
            .get("last-event-id")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse().ok()),
    };
    let (backlog, rx) = s.gw.subscribe(after);
    let live = stream::unfold(rx, |mut rx| async move {
        match rx.recv().await {
            Ok(e) => Some((e, rx)),
            Err(broadcast::error::RecvError::Lagged(n)) => {
                tracing::warn!(missed = n, "slow event subscriber disconnected");
                None
            }
            Err(broadcast::error::RecvError::Closed) => None,
        }
    });
    let events = stream::iter(backlog).chain(live).map(|e| Ok(sse_event(&e)));
    Ok(Sse::new(events).keep_alive(KeepAlive::new().interval(Duration::from_secs(15))))
}

const BUILTIN_PAGE: &str = r#"<!doctype html>
<html><head><meta charset="utf-8"><title>vitalgate</title></head>
<body>
<h1>vitalgate</h1>
<p>No dashboard bundle is configured; start the gateway with <code>--static-dir</code> to serve one.</p>
<ul>
<li><a href="/api/patients">/api/patients</a></li>
<li><a href="/api/alerts">/api/alerts</a></li>
<li><a href="/api/status">/api/status</a></li>
<li><a href="/api/stream">/api/stream</a> (server-sent events)</li>
</ul>
</body></html>
"#;

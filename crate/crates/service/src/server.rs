//! HTTP, event-stream and raw TCP front ends over a single [`EngineState`].
//!
//! Every mutation takes the engine lock, applies its change, ticks and publishes the
//! resulting events before releasing it, so the stream order matches the order the
//! engine saw.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use situwatch_core::ingest::{self, parse_record};
use situwatch_core::prediction::AlertPolicy;
use situwatch_core::{
    Alert, Baseline, ChannelSpec, EngineEvent, EngineState, Sample, SimilarityConfig,
    SimilarityReport, SnapshotRequest,
};
use tokio::io::{AsyncBufReadExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::broadcast;
use tokio_stream::wrappers::BroadcastStream;
use tokio_stream::{Stream, StreamExt};
use tower_http::services::ServeDir;

use crate::config::ServiceConfig;
use crate::error::ApiError;

const EVENT_BUFFER: usize = 4096;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub accepted: usize,
    pub rejected: usize,
}

pub struct AppState {
    engine: Mutex<EngineState>,
    events: broadcast::Sender<EngineEvent>,
    data_dir: PathBuf,
}

pub type Shared = Arc<AppState>;

impl AppState {
    /// Builds the engine from `cfg` and registers every baseline found in the store.
    pub fn new(cfg: &ServiceConfig) -> anyhow::Result<Shared> {
        cfg.validate()?;
        let mut engine = EngineState::new(
            cfg.channels.clone(),
            cfg.window.clone(),
            cfg.policy.clone(),
            cfg.similarity.clone(),
        )?;
        std::fs::create_dir_all(&cfg.data_dir)
            .with_context(|| format!("creating data dir {}", cfg.data_dir.display()))?;
        let loaded = ingest::load_baselines(&cfg.data_dir)?;
        for w in &loaded.warnings {
            log::warn!("skipping {}: {}", w.path.display(), w.error);
        }
        for b in loaded.baselines {
            log::info!("loaded baseline `{}`", b.baseline_id);
            engine.add_baseline(b);
        }
        let (events, _) = broadcast::channel(EVENT_BUFFER);
        Ok(Arc::new(Self {
            engine: Mutex::new(engine),
            events,
            data_dir: cfg.data_dir.clone(),
        }))
    }

    pub fn engine(&self) -> MutexGuard<'_, EngineState> {
        self.engine.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn subscribe(&self) -> broadcast::Receiver<EngineEvent> {
        self.events.subscribe()
    }

    fn tick_and_publish(&self, engine: &mut EngineState) {
        for event in engine.tick(f64::INFINITY).events {
            // No subscribers is not an error.
            let _ = self.events.send(event);
        }
    }

    /// Pushes readings, then ticks once. Readings on unconfigured channels, invalid
    /// readings and readings older than the retention horizon are rejected.
    pub fn ingest<I: IntoIterator<Item = Sample>>(&self, samples: I) -> IngestSummary {
        let mut engine = self.engine();
        let mut summary = IngestSummary::default();
        for s in samples {
            let known = engine.specs().iter().any(|c| c.channel_id == s.channel_id);
            if known && engine.push_sample(s) {
                summary.accepted += 1;
            } else {
                summary.rejected += 1;
            }
        }
        if summary.accepted > 0 {
            self.tick_and_publish(&mut engine);
        }
        summary
    }

    /// Parses wire-format text and ingests it. Malformed lines count as rejected.
    pub fn ingest_text(&self, text: &str) -> IngestSummary {
        let mut malformed = 0;
        let mut samples = vec![];
        for line in text.lines() {
            match parse_record(line) {
                Ok(Some(s)) => samples.push(s),
                Ok(None) => {}
                Err(e) => {
                    log::warn!("{e}");
                    malformed += 1;
                }
            }
        }
        let mut summary = self.ingest(samples);
        summary.rejected += malformed;
        summary
    }

    pub fn heartbeat(&self) {
        let mut engine = self.engine();
        self.tick_and_publish(&mut engine);
    }
}

// ---------------------------------------------------------------------------
// Handlers

fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(e.to_string()))
}

async fn post_samples(
    State(s): State<Shared>,
    body: Bytes,
) -> Result<Json<IngestSummary>, ApiError> {
    let text = std::str::from_utf8(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(Json(s.ingest_text(text)))
}

async fn get_channels(State(s): State<Shared>) -> Json<Vec<ChannelSpec>> {
    Json(s.engine().specs().to_vec())
}

async fn list_baselines(State(s): State<Shared>) -> Json<Vec<Baseline>> {
    Json(s.engine().registry().to_vec())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BaselineRequest {
    event_time: f64,
    label: String,
    lead_time: Option<f64>,
    duration: Option<f64>,
    #[serde(alias = "n_samples")]
    n: Option<usize>,
}

async fn create_baseline(
    State(s): State<Shared>,
    body: Bytes,
) -> Result<(StatusCode, Json<Baseline>), ApiError> {
    let req: BaselineRequest = parse_body(&body)?;
    let mut engine = s.engine();
    let window = engine.window_config().clone();
    let snapshot = SnapshotRequest {
        event_time: req.event_time,
        lead_time: req
            .lead_time
            .unwrap_or(situwatch_core::situation::DEFAULT_LEAD_TIME),
        duration: req.duration.unwrap_or(window.duration),
        n_samples: req.n.unwrap_or(window.n_samples),
        label: req.label,
    };
    let baseline = engine.snapshot_baseline(&snapshot)?;
    if let Err(e) = ingest::save_baseline(&baseline, &s.data_dir) {
        engine.remove_baseline(&baseline.baseline_id);
        return Err(ApiError::internal(e.to_string()));
    }
    log::info!("captured baseline `{}`", baseline.baseline_id);
    Ok((StatusCode::CREATED, Json(baseline)))
}

async fn delete_baseline(
    State(s): State<Shared>,
    UrlPath(id): UrlPath<String>,
) -> Result<StatusCode, ApiError> {
    let mut engine = s.engine();
    if engine.remove_baseline(&id).is_none() {
        return Err(ApiError::unknown_baseline(&id));
    }
    ingest::remove_baseline(&s.data_dir, &id).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(StatusCode::NO_CONTENT)
}

async fn latest_similarity(State(s): State<Shared>) -> Json<Vec<SimilarityReport>> {
    Json(s.engine().latest_reports().values().cloned().collect())
}

#[derive(Debug, Deserialize)]
struct AlertQuery {
    since: Option<f64>,
}

async fn get_alerts(State(s): State<Shared>, Query(q): Query<AlertQuery>) -> Json<Vec<Alert>> {
    let engine = s.engine();
    Json(match q.since {
        Some(t) => engine.alerts_since(t).to_vec(),
        None => engine.alert_log().to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuntimeConfig {
    pub policy: AlertPolicy,
    pub similarity: SimilarityConfig,
}

fn runtime_config(engine: &EngineState) -> RuntimeConfig {
    RuntimeConfig {
        policy: engine.policy().clone(),
        similarity: engine.similarity_config().clone(),
    }
}

async fn get_config(State(s): State<Shared>) -> Json<RuntimeConfig> {
    Json(runtime_config(&s.engine()))
}

/// Recursively overlays `patch` onto `base`; objects merge, everything else replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Accepts a full or partial `{policy, similarity}` document. Both halves are
/// validated before either is applied.
async fn put_config(State(s): State<Shared>, body: Bytes) -> Result<Json<RuntimeConfig>, ApiError> {
    let patch: Value = parse_body(&body)?;
    if !patch.is_object() {
        return Err(ApiError::bad_request("expected a JSON object"));
    }
    let mut engine = s.engine();
    let mut merged = serde_json::to_value(runtime_config(&engine))
        .map_err(|e| ApiError::internal(e.to_string()))?;
    merge(&mut merged, patch);
    let next: RuntimeConfig =
        serde_json::from_value(merged).map_err(|e| ApiError::bad_request(e.to_string()))?;
    next.policy.validate()?;
    next.similarity.validate()?;
    engine.set_policy(next.policy)?;
    engine.set_similarity_config(next.similarity)?;
    Ok(Json(runtime_config(&engine)))
}

#[derive(Debug, Serialize)]
struct Status {
    watermark: Option<f64>,
    last_window_end: Option<f64>,
    baselines: usize,
    alerts: usize,
    buffered: BTreeMap<String, usize>,
}

async fn get_status(State(s): State<Shared>) -> Json<Status> {
    let engine = s.engine();
    Json(Status {
        watermark: engine.watermark(),
        last_window_end: engine.cursor().last_emitted_end(),
        baselines: engine.registry().len(),
        alerts: engine.alert_log().len(),
        buffered: engine
            .specs()
            .iter()
            .map(|c| (c.channel_id.clone(), engine.cursor().len(&c.channel_id)))
            .collect(),
    })
}

pub fn event_name(e: &EngineEvent) -> &'static str {
    match e {
        EngineEvent::Report(_) => "report",
        EngineEvent::Alert(_) => "alert",
        EngineEvent::AlertCleared(_) => "alert_cleared",
    }
}

async fn stream(State(s): State<Shared>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let events = BroadcastStream::new(s.subscribe()).filter_map(|item| match item {
        Ok(e) => match serde_json::to_string(&e) {
            Ok(json) => Some(Ok(Event::default().event(event_name(&e)).data(json))),
            Err(err) => {
                log::error!("cannot encode event: {err}");
                None
            }
        },
        Err(err) => {
            log::warn!("stream subscriber fell behind: {err}");
            None
        }
    });
    Sse::new(events).keep_alive(KeepAlive::default())
}

pub fn router(state: Shared, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/samples", post(post_samples))
        .route("/api/channels", get(get_channels))
        .route("/api/baselines", get(list_baselines).post(create_baseline))
        .route("/api/baselines/{id}", delete(delete_baseline))
        .route("/api/similarity/latest", get(latest_similarity))
        .route("/api/alerts", get(get_alerts))
        .route("/api/config", get(get_config).put(put_config))
        .route("/api/status", get(get_status))
        .route("/api/stream", get(stream))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

// ---------------------------------------------------------------------------
// Listeners

async fn tcp_connection(state: Shared, socket: TcpStream, peer: SocketAddr) {
    let mut lines = BufReader::new(socket).lines();
    let mut total = IngestSummary::default();
    loop {
        match lines.next_line().await {
            Ok(Some(line)) => {
                let s = state.ingest_text(&line);
                total.accepted += s.accepted;
                total.rejected += s.rejected;
            }
            Ok(None) => break,
            Err(e) => {
                log::warn!("ingest connection {peer}: {e}");
                break;
            }
        }
    }
    log::info!(
        "ingest connection {peer} closed: {} accepted, {} rejected",
        total.accepted,
        total.rejected
    );
}

async fn tcp_ingest(state: Shared, listener: TcpListener) {
    loop {
        match listener.accept().await {
            Ok((socket, peer)) => {
                tokio::spawn(tcp_connection(state.clone(), socket, peer));
            }
            Err(e) => log::warn!("ingest accept failed: {e}"),
        }
    }
}

/// A started service. Dropping it does not stop the tasks; call [`Running::shutdown`].
pub struct Running {
    pub http_addr: SocketAddr,
    pub tcp_addr: Option<SocketAddr>,
    pub state: Shared,
    tasks: Vec<tokio::task::JoinHandle<()>>,
}

impl Running {
    pub fn shutdown(self) {
        for t in self.tasks {
            t.abort();
        }
    }
}

/// Binds every listener and spawns the server tasks on the current runtime.
pub async fn start(cfg: &ServiceConfig) -> anyhow::Result<Running> {
    let state = AppState::new(cfg)?;
    let http = TcpListener::bind((cfg.bind, cfg.port))
        .await
        .with_context(|| format!("binding HTTP port {}", cfg.port))?;
    let http_addr = http.local_addr()?;
    let app = router(state.clone(), cfg.static_dir.as_deref());
    let mut tasks = vec![tokio::spawn(async move {
        if let Err(e) = axum::serve(http, app).await {
            log::error!("http server stopped: {e}");
        }
    })];

    let mut tcp_addr = None;
    if let Some(port) = cfg.tcp_port {
        let listener = TcpListener::bind((cfg.bind, port))
            .await
            .with_context(|| format!("binding ingest port {port}"))?;
        tcp_addr = Some(listener.local_addr()?);
        tasks.push(tokio::spawn(tcp_ingest(state.clone(), listener)));
    }

    let beat = state.clone();
    let period = Duration::from_millis(cfg.heartbeat_ms);
    tasks.push(tokio::spawn(async move {
        let mut interval = tokio::time::interval(period);
        interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            interval.tick().await;
            beat.heartbeat();
        }
    }));

    Ok(Running {
        http_addr,
        tcp_addr,
        state,
        tasks,
    })
}

/// Runs until Ctrl-C.
pub async fn serve(cfg: &ServiceConfig) -> anyhow::Result<()> {
    let running = start(cfg).await?;
    log::info!("listening on http://{}", running.http_addr);
    if let Some(addr) = running.tcp_addr {
        log::info!("line-protocol ingest on {addr}");
    }
    tokio::signal::ctrl_c().await?;
    log::info!("shutting down");
    running.shutdown();
    Ok(())
}

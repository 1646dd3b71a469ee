use std::convert::Infallible;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::Json;
use futures::stream::{self, Stream, StreamExt};
use pcal_core::datasets::{generate_shape, Family, ShapeSpec};
use pcal_core::geom::load_ply;
use pcal_core::labels::{ClassId, LabelMap, Provenance};
use pcal_core::session::{ClickKind, JobKind, Session, SessionConfig, TrainingJob};
use pcal_core::trainer::TrainProgress;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use crate::error::{ApiError, ApiResult};
use crate::snapshot::{encode_snapshot, SnapshotMeta};
use crate::state::{AppState, CloudEntry, MetricsRound, ServerEvent, SessionSlot};

type App = State<Arc<AppState>>;

/// Interval between progress re-broadcasts while a job runs.
pub const HEARTBEAT: Duration = Duration::from_secs(1);

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub family: Family,
    pub part_count: usize,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_points")]
    pub points_n: usize,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
}

fn default_points() -> usize {
    1024
}

fn default_noise() -> f64 {
    0.01
}

/// Either an uploaded PLY (with optional ground-truth label file) or a synthetic shape.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudRequest {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub ply: Option<String>,
    #[serde(default)]
    pub labels: Option<String>,
    #[serde(default)]
    pub generate: Option<GenerateRequest>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct CloudInfo {
    pub id: String,
    pub points: usize,
    pub has_truth: bool,
    pub num_classes: Option<usize>,
}

impl CloudInfo {
    fn of(id: &str, entry: &CloudEntry) -> Self {
        Self {
            id: id.to_string(),
            points: entry.cloud.len(),
            has_truth: entry.truth.is_some(),
            num_classes: entry.truth.as_ref().map(LabelMap::num_classes),
        }
    }
}

pub async fn add_cloud(State(app): App, Json(req): Json<CloudRequest>) -> ApiResult<(StatusCode, Json<CloudInfo>)> {
    let id = req.id.clone().unwrap_or_else(|| app.next_id("c"));
    let cloud_id = id.clone();
    let entry = tokio::task::spawn_blocking(move || build_cloud(cloud_id, req))
        .await
        .map_err(|e| ApiError::BadRequest(e.to_string()))??;
    app.add_cloud(id.clone(), entry.clone())?;
    Ok((StatusCode::CREATED, Json(CloudInfo::of(&id, &entry))))
}

/// Parses or generates the cloud and stamps it with its registry id.
fn build_cloud(id: String, req: CloudRequest) -> ApiResult<CloudEntry> {
    let (cloud, truth) = match (req.ply, req.generate) {
        (Some(ply), None) => {
            let cloud = load_ply(ply.as_bytes())?;
            let truth = req.labels.map(|t| LabelMap::from_label_file(&t, Provenance::Seed)).transpose()?;
            if let Some(t) = &truth {
                if t.len() != cloud.len() {
                    return Err(ApiError::BadRequest(format!("{} labels for {} points", t.len(), cloud.len())));
                }
            }
            (cloud, truth)
        }
        (None, Some(g)) => {
            if req.labels.is_some() {
                return Err(ApiError::BadRequest("labels come with generated shapes".into()));
            }
            let spec = ShapeSpec { family: g.family, part_count: g.part_count, noise_sigma: g.noise_sigma, points_n: g.points_n, rng_seed: g.rng_seed };
            let (cloud, truth) = generate_shape(&spec)?;
            (cloud, Some(truth))
        }
        _ => return Err(ApiError::BadRequest("give exactly one of `ply` or `generate`".into())),
    };
    Ok(CloudEntry { cloud: Arc::new(cloud.with_id(id)), truth })
}

pub async fn list_clouds(State(app): App) -> Json<Vec<CloudInfo>> {
    Json(app.clouds().iter().map(|(id, e)| CloudInfo::of(id, e)).collect())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub cloud_id: String,
    pub num_classes: usize,
    #[serde(default)]
    pub config: Option<SessionConfig>,
    #[serde(default = "yes")]
    pub use_base_model: bool,
}

fn yes() -> bool {
    true
}

pub async fn create_session(State(app): App, Json(req): Json<CreateSession>) -> ApiResult<(StatusCode, Json<SnapshotMeta>)> {
    let entry = app.cloud(&req.cloud_id)?;
    let truth = entry.truth.filter(|t| t.num_classes() == req.num_classes);
    let base = if req.use_base_model { app.base_model() } else { None };
    let config = req.config.unwrap_or_else(|| app.config.session_defaults.clone());
    let id = app.next_id("s");
    let cloud = (*entry.cloud).clone();
    let num_classes = req.num_classes;
    let session = tokio::task::spawn_blocking(move || Session::create(id, cloud, num_classes, base.as_deref(), config))
        .await
        .map_err(|e| ApiError::BadRequest(e.to_string()))??;
    app.persist(&session);
    let slot = app.insert_session(SessionSlot::new(session, truth));
    let meta = slot.meta(&slot.lock());
    Ok((StatusCode::CREATED, Json(meta)))
}

#[derive(Debug, Deserialize)]
pub struct SnapshotQuery {
    #[serde(default)]
    pub format: Option<String>,
}

pub async fn get_session(State(app): App, Path(id): Path<String>, Query(q): Query<SnapshotQuery>) -> ApiResult<Response> {
    let slot = app.session(&id)?;
    let session = slot.lock();
    let metrics = slot.metrics(&session);
    match q.format.as_deref() {
        Some("json") => Ok(Json(SnapshotMeta::of(&session, metrics)).into_response()),
        None | Some("binary") => {
            let bytes = encode_snapshot(&session, metrics).map_err(|e| ApiError::BadRequest(e.to_string()))?;
            Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
        }
        Some(other) => Err(ApiError::BadRequest(format!("unknown format {other}"))),
    }
}

pub async fn event_log(State(app): App, Path(id): Path<String>) -> ApiResult<Response> {
    let slot = app.session(&id)?;
    let log = slot.lock().event_log();
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], log).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsRequest {
    pub seeds: Vec<(usize, ClassId)>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionsRequest {
    pub corrections: Vec<(usize, ClassId)>,
    #[serde(default)]
    pub expand: bool,
}

/// Applies a synchronous edit, then persists and announces the new phase.
fn edit(app: &AppState, slot: &SessionSlot, f: impl FnOnce(&mut Session) -> pcal_core::Result<()>) -> ApiResult<Json<SnapshotMeta>> {
    let mut session = slot.lock();
    f(&mut session)?;
    app.persist(&session);
    slot.publish(SessionSlot::phase_event(&session));
    Ok(Json(slot.meta(&session)))
}

pub async fn seeds(State(app): App, Path(id): Path<String>, Json(req): Json<SeedsRequest>) -> ApiResult<Json<SnapshotMeta>> {
    let slot = app.session(&id)?;
    edit(&app, &slot, |s| s.submit_seeds(&req.seeds))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct GrowPreview {
    /// Class per point, `null` where growth did not reach.
    pub labels: Vec<Option<ClassId>>,
    pub labeled: usize,
}

/// Shows the regions a seed set would grow without committing any click.
pub async fn grow_preview(State(app): App, Path(id): Path<String>, Json(req): Json<SeedsRequest>) -> ApiResult<Json<GrowPreview>> {
    let slot = app.session(&id)?;
    let labels = slot.lock().preview_seeds(&req.seeds)?;
    Ok(Json(GrowPreview { labeled: labels.labeled_count(), labels: labels.classes() }))
}

pub async fn corrections(
    State(app): App,
    Path(id): Path<String>,
    Json(req): Json<CorrectionsRequest>,
) -> ApiResult<Json<SnapshotMeta>> {
    let slot = app.session(&id)?;
    edit(&app, &slot, |s| s.submit_corrections(&req.corrections, req.expand))
}

pub async fn train(State(app): App, Path(id): Path<String>) -> ApiResult<(StatusCode, Json<SnapshotMeta>)> {
    start_job(app, id, Session::begin_training).await
}

pub async fn finalize(State(app): App, Path(id): Path<String>) -> ApiResult<(StatusCode, Json<SnapshotMeta>)> {
    start_job(app, id, Session::begin_finalize).await
}

async fn start_job(
    app: Arc<AppState>,
    id: String,
    begin: fn(&mut Session) -> pcal_core::Result<TrainingJob>,
) -> ApiResult<(StatusCode, Json<SnapshotMeta>)> {
    let slot = app.session(&id)?;
    let (job, meta) = {
        let mut session = slot.lock();
        let job = begin(&mut session)?;
        slot.publish(SessionSlot::phase_event(&session));
        (job, slot.meta(&session))
    };
    tokio::spawn(run_job(app, slot, job));
    Ok((StatusCode::ACCEPTED, Json(meta)))
}

async fn run_job(app: Arc<AppState>, slot: Arc<SessionSlot>, job: TrainingJob) {
    let kind = job.kind;
    let latest = Arc::new(Mutex::new(ServerEvent::Progress {
        epoch: 0,
        epochs: job.epochs(),
        loss: f32::NAN,
        segment: f32::NAN,
        smooth: f32::NAN,
    }));
    let heartbeat = {
        let latest = Arc::clone(&latest);
        let slot = Arc::clone(&slot);
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(HEARTBEAT);
            loop {
                tick.tick().await;
                let event = latest.lock().unwrap_or_else(|e| e.into_inner()).clone();
                slot.publish(event);
            }
        })
    };
    let worker = {
        let slot = Arc::clone(&slot);
        tokio::task::spawn_blocking(move || {
            job.run(|p: TrainProgress| {
                let event = ServerEvent::progress(&p);
                *latest.lock().unwrap_or_else(|e| e.into_inner()) = event.clone();
                slot.publish(event);
            })
        })
    };
    let result = worker.await;
    heartbeat.abort();

    let mut session = slot.lock();
    let outcome = match result {
        Ok(Ok(output)) => session.complete_job(output).map_err(|e| e.to_string()),
        Ok(Err(e)) => Err(e.to_string()),
        Err(e) => Err(format!("training task failed: {e}")),
    };
    match outcome {
        Ok(()) => {
            app.persist(&session);
            let metrics = slot.metrics(&session);
            match kind {
                JobKind::Round => {
                    if let Some(m) = metrics {
                        slot.history.lock().unwrap_or_else(|e| e.into_inner()).push(MetricsRound {
                            round: session.round(),
                            accuracy: m.accuracy,
                            miou: m.miou,
                            clicks_cumulative: session.clicks().len(),
                        });
                    }
                    slot.publish(ServerEvent::Trained { round: session.round(), metrics });
                }
                JobKind::Final => {
                    app.publish_base_model(Arc::clone(session.model()));
                    slot.publish(ServerEvent::Finalized { round: session.round() });
                }
            }
        }
        Err(message) => {
            log::error!("session {}: {message}", session.id());
            session.abort_job();
            slot.publish(ServerEvent::Failed { message });
        }
    }
    slot.publish(SessionSlot::phase_event(&session));
}

pub async fn events(State(app): App, Path(id): Path<String>) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let slot = app.session(&id)?;
    // subscribe before reading the phase so nothing falls between the two
    let rx = slot.events.subscribe();
    let first = SessionSlot::phase_event(&slot.lock());
    let rest = stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(event) => return Some((event, rx)),
                Err(broadcast::error::RecvError::Lagged(skipped)) => log::warn!("subscriber skipped {skipped} events"),
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    let stream = stream::once(async move { first }).chain(rest).map(|event| {
        let data = serde_json::to_string(&event).expect("events serialize");
        Ok(Event::default().event(event.name()).data(data))
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub session_id: String,
    pub phase: pcal_core::session::Phase,
    pub round: usize,
    pub seed_clicks: usize,
    pub correction_clicks: usize,
    pub clicks_total: usize,
    pub labeled: usize,
    pub accuracy: Option<f64>,
    pub miou: Option<f64>,
    pub rounds: Vec<MetricsRound>,
}

pub async fn metrics(State(app): App, Path(id): Path<String>) -> ApiResult<Json<MetricsReport>> {
    let slot = app.session(&id)?;
    let session = slot.lock();
    let current = slot.metrics(&session);
    let rounds = slot
        .history
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .clone();
    Ok(Json(MetricsReport {
        session_id: session.id().to_string(),
        phase: session.phase(),
        round: session.round(),
        seed_clicks: session.clicks().count(ClickKind::Seed),
        correction_clicks: session.clicks().count(ClickKind::Correction),
        clicks_total: session.clicks().len(),
        labeled: session.labels().labeled_count(),
        accuracy: current.map(|m| m.accuracy),
        miou: current.map(|m| m.miou),
        rounds,
    }))
}

/// Fallback for unknown routes.
pub async fn not_found() -> ApiError {
    ApiError::NotFound("route".into())
}

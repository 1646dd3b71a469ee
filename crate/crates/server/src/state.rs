//! Shared server state: clouds, sessions, the published base model and event channels.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use pcal_core::geom::PointCloud;
use pcal_core::labels::LabelMap;
use pcal_core::nnet::ModelParams;
use pcal_core::oracle::evaluate;
use pcal_core::session::{Phase, Session, SessionConfig};
use pcal_core::trainer::TrainProgress;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use crate::error::{ApiError, ApiResult};
use crate::snapshot::{Metrics, SnapshotMeta};

/// Events pushed to stream subscribers of one session.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerEvent {
    Phase { phase: Phase, round: usize, clicks_total: usize },
    Progress { epoch: usize, epochs: usize, loss: f32, segment: f32, smooth: f32 },
    Trained { round: usize, metrics: Option<Metrics> },
    Finalized { round: usize },
    Failed { message: String },
}

impl ServerEvent {
    pub fn name(&self) -> &'static str {
        match self {
            ServerEvent::Phase { .. } => "phase",
            ServerEvent::Progress { .. } => "progress",
            ServerEvent::Trained { .. } => "trained",
            ServerEvent::Finalized { .. } => "finalized",
            ServerEvent::Failed { .. } => "failed",
        }
    }

    pub fn progress(p: &TrainProgress) -> Self {
        ServerEvent::Progress {
            epoch: p.epoch,
            epochs: p.epochs,
            loss: p.loss.total,
            segment: p.loss.segment,
            smooth: p.loss.smooth,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CloudEntry {
    pub cloud: Arc<PointCloud>,
    pub truth: Option<LabelMap>,
}

/// Agreement with ground truth after one training pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRound {
    pub round: usize,
    pub accuracy: f64,
    pub miou: f64,
    pub clicks_cumulative: usize,
}

pub struct SessionSlot {
    session: Mutex<Session>,
    pub truth: Option<LabelMap>,
    pub history: Mutex<Vec<MetricsRound>>,
    pub events: broadcast::Sender<ServerEvent>,
}

impl SessionSlot {
    pub fn new(session: Session, truth: Option<LabelMap>) -> Self {
        let (events, _) = broadcast::channel(1024);
        Self { session: Mutex::new(session), truth, history: Mutex::new(Vec::new()), events }
    }

    /// Exclusive access; every mutation of a session goes through here.
    pub fn lock(&self) -> MutexGuard<'_, Session> {
        self.session.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn metrics(&self, session: &Session) -> Option<Metrics> {
        let truth = self.truth.as_ref()?;
        evaluate(session.labels(), truth).ok().map(|(accuracy, miou)| Metrics { accuracy, miou })
    }

    pub fn meta(&self, session: &Session) -> SnapshotMeta {
        SnapshotMeta::of(session, self.metrics(session))
    }

    pub fn phase_event(session: &Session) -> ServerEvent {
        ServerEvent::Phase { phase: session.phase(), round: session.round(), clicks_total: session.clicks().len() }
    }

    pub fn publish(&self, event: ServerEvent) {
        // no subscribers is fine
        let _ = self.events.send(event);
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServerConfig {
    pub session_defaults: SessionConfig,
    pub base_model: Option<ModelParams<f32>>,
    /// Directory receiving one `<session>.ndjson` event log per session.
    pub log_dir: Option<PathBuf>,
}

pub struct AppState {
    pub config: ServerConfig,
    clouds: RwLock<BTreeMap<String, CloudEntry>>,
    sessions: RwLock<BTreeMap<String, Arc<SessionSlot>>>,
    base_model: RwLock<Option<Arc<ModelParams<f32>>>>,
    counter: AtomicU64,
}

impl AppState {
    pub fn new(config: ServerConfig) -> Arc<Self> {
        let base = config.base_model.clone().map(Arc::new);
        Arc::new(Self {
            config,
            clouds: RwLock::default(),
            sessions: RwLock::default(),
            base_model: RwLock::new(base),
            counter: AtomicU64::new(0),
        })
    }

    pub fn next_id(&self, prefix: &str) -> String {
        format!("{prefix}{}", self.counter.fetch_add(1, Ordering::Relaxed) + 1)
    }

    pub fn add_cloud(&self, id: String, entry: CloudEntry) -> ApiResult<()> {
        let mut clouds = self.clouds.write().unwrap_or_else(|e| e.into_inner());
        if clouds.contains_key(&id) {
            return Err(ApiError::BadRequest(format!("cloud {id} already exists")));
        }
        clouds.insert(id, entry);
        Ok(())
    }

    pub fn cloud(&self, id: &str) -> ApiResult<CloudEntry> {
        let clouds = self.clouds.read().unwrap_or_else(|e| e.into_inner());
        clouds.get(id).cloned().ok_or_else(|| ApiError::NotFound(format!("cloud {id}")))
    }

    pub fn clouds(&self) -> Vec<(String, CloudEntry)> {
        let clouds = self.clouds.read().unwrap_or_else(|e| e.into_inner());
        clouds.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn insert_session(&self, slot: SessionSlot) -> Arc<SessionSlot> {
        let id = slot.lock().id().to_string();
        let slot = Arc::new(slot);
        self.sessions.write().unwrap_or_else(|e| e.into_inner()).insert(id, Arc::clone(&slot));
        slot
    }

    pub fn session(&self, id: &str) -> ApiResult<Arc<SessionSlot>> {
        let sessions = self.sessions.read().unwrap_or_else(|e| e.into_inner());
        sessions.get(id).cloned().ok_or_else(|| ApiError::NotFound(format!("session {id}")))
    }

    pub fn base_model(&self) -> Option<Arc<ModelParams<f32>>> {
        self.base_model.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Last writer wins.
    pub fn publish_base_model(&self, model: Arc<ModelParams<f32>>) {
        *self.base_model.write().unwrap_or_else(|e| e.into_inner()) = Some(model);
    }

    /// Rewrites the session's event log file when logging is enabled.
    pub fn persist(&self, session: &Session) {
        if let Some(dir) = &self.config.log_dir {
            let path = dir.join(format!("{}.ndjson", session.id()));
            if let Err(e) = std::fs::create_dir_all(dir).and_then(|_| std::fs::write(&path, session.event_log())) {
                log::warn!("cannot write {}: {e}", path.display());
            }
        }
    }
}

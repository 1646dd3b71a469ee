//! The per-cloud annotation state machine.
//!
//! ```text
//! Seeding -> Growing -> Training -> Reviewing -> (Correcting -> Training)* -> Finalized
//! ```
//!
//! A [`Session`] is the only write path for labels and clicks. Every mutating call either
//! succeeds or returns an error with the state untouched. Training is split into
//! [`Session::begin_training`] and [`Session::complete_job`] so a host can run the
//! [`TrainingJob`] off-thread while the session rejects writes with [`Error::Busy`].

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{estimate_normals, PointCloud, SpatialIndex};
use crate::labels::{ClassId, Label, LabelMap, Provenance};
use crate::nnet::{forward, init_or_resize_head, ModelParams};
use crate::region::{grow_from, grow_regions, GrowConfig, GrowMode};
use crate::trainer::{final_retrain_with_progress, finetune_round_with_progress, TrainConfig, TrainProgress};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Waiting for the initial seeds.
    Seeding,
    /// Seeds placed and grown; waiting for the first training pass.
    Growing,
    /// A training job is running.
    Training,
    /// Predictions cover the cloud.
    Reviewing,
    /// Corrections submitted since the last training pass.
    Correcting,
    Finalized,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::Seeding => "seeding",
            Phase::Growing => "growing",
            Phase::Training => "training",
            Phase::Reviewing => "reviewing",
            Phase::Correcting => "correcting",
            Phase::Finalized => "finalized",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClickKind {
    Seed,
    Correction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Click {
    pub kind: ClickKind,
    pub point_id: usize,
    pub class_id: ClassId,
    pub round: usize,
    /// Logical clock: index of the accepted operation that produced the click.
    pub timestamp: u64,
}

/// Append-only record of clicks.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickLog {
    entries: Vec<Click>,
}

impl ClickLog {
    pub fn entries(&self) -> &[Click] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, kind: ClickKind) -> usize {
        self.entries.iter().filter(|c| c.kind == kind).count()
    }

    /// Clicks issued in `round`.
    pub fn in_round(&self, round: usize) -> usize {
        self.entries.iter().filter(|c| c.round == round).count()
    }

    fn extend(&mut self, clicks: impl IntoIterator<Item = Click>) {
        self.entries.extend(clicks);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub grow: GrowConfig,
    pub train: TrainConfig,
    /// Neighborhood size for normal estimation when the cloud carries none.
    pub normal_neighbors: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self { grow: GrowConfig::default(), train: TrainConfig::default(), normal_neighbors: 24 }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        self.grow.validate()?;
        self.train.validate()?;
        if self.normal_neighbors < 3 {
            return Err(Error::invalid("normal_neighbors must be at least 3"));
        }
        Ok(())
    }
}

/// One accepted operation, as persisted in the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum SessionEvent {
    Create {
        session_id: String,
        cloud_id: String,
        points: usize,
        num_classes: usize,
        config: SessionConfig,
        /// FNV-1a digest of the base checkpoint parameters, if any.
        base_model: Option<String>,
    },
    Seeds { seeds: Vec<(usize, ClassId)> },
    Train { round: usize },
    Corrections { corrections: Vec<(usize, ClassId)>, expand: bool },
    Finalize,
}

/// Hex FNV-1a digest of a model's parameter bytes.
pub fn model_digest(params: &ModelParams<f32>) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in params.to_bytes().into_iter().chain((params.num_classes() as u64).to_le_bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobKind {
    Round,
    Final,
}

/// A detached training job. Running it does not touch the session.
#[derive(Debug, Clone)]
pub struct TrainingJob {
    pub kind: JobKind,
    pub round: usize,
    params: Arc<ModelParams<f32>>,
    cloud: Arc<PointCloud>,
    labels: LabelMap,
    config: TrainConfig,
    ticket: u64,
}

/// Result of [`TrainingJob::run`], handed back to [`Session::complete_job`].
#[derive(Debug, Clone)]
pub struct JobOutput {
    kind: JobKind,
    params: ModelParams<f32>,
    predictions: Option<Vec<ClassId>>,
    ticket: u64,
}

impl TrainingJob {
    pub fn epochs(&self) -> usize {
        match self.kind {
            JobKind::Round => self.config.epochs_per_round,
            JobKind::Final => 2 * self.config.epochs_per_round,
        }
    }

    pub fn run(&self, mut progress: impl FnMut(TrainProgress)) -> Result<JobOutput> {
        match self.kind {
            JobKind::Round => {
                let params =
                    finetune_round_with_progress(&self.params, &self.cloud, &self.labels, self.round, &self.config, &mut progress)?;
                let (logits, _) = forward(&params, &self.cloud)?;
                let predictions = logits.argmax().into_iter().map(|c| c as ClassId).collect();
                Ok(JobOutput { kind: self.kind, params, predictions: Some(predictions), ticket: self.ticket })
            }
            JobKind::Final => {
                let params = final_retrain_with_progress(&self.params, &self.cloud, &self.labels, &self.config, &mut progress)?;
                Ok(JobOutput { kind: self.kind, params, predictions: None, ticket: self.ticket })
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Session {
    id: String,
    cloud: Arc<PointCloud>,
    index: Arc<SpatialIndex>,
    labels: LabelMap,
    model: Arc<ModelParams<f32>>,
    phase: Phase,
    /// Phase to restore if a running job is aborted.
    resume: Phase,
    round: usize,
    clicks: ClickLog,
    config: SessionConfig,
    events: Vec<SessionEvent>,
    tickets: u64,
}

impl Session {
    /// Starts a session. The base model's head is re-initialized only when its class count
    /// differs from `num_classes`.
    pub fn create(
        session_id: impl Into<String>,
        cloud: PointCloud,
        num_classes: usize,
        base_model: Option<&ModelParams<f32>>,
        config: SessionConfig,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {num_classes}")));
        }
        config.validate()?;
        let model = match base_model {
            Some(base) if base.num_classes() == num_classes => base.clone(),
            other => init_or_resize_head(other, num_classes, config.train.rng_seed)?,
        };
        let cloud = if config.grow.mode == GrowMode::NormalAngle && cloud.normals().is_none() {
            estimate_normals(&cloud, config.normal_neighbors.min(cloud.len().saturating_sub(1)).max(3))?
        } else {
            cloud
        };
        let index = SpatialIndex::build(&cloud);
        let id = session_id.into();
        let create = SessionEvent::Create {
            session_id: id.clone(),
            cloud_id: cloud.id().to_string(),
            points: cloud.len(),
            num_classes,
            config: config.clone(),
            base_model: base_model.map(model_digest),
        };
        Ok(Self {
            id,
            labels: LabelMap::unlabeled(cloud.len(), num_classes)?,
            cloud: Arc::new(cloud),
            index: Arc::new(index),
            model: Arc::new(model),
            phase: Phase::Seeding,
            resume: Phase::Seeding,
            round: 0,
            clicks: ClickLog::default(),
            config,
            events: vec![create],
            tickets: 0,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn cloud(&self) -> &PointCloud {
        &self.cloud
    }

    pub fn index(&self) -> &SpatialIndex {
        &self.index
    }

    pub fn labels(&self) -> &LabelMap {
        &self.labels
    }

    pub fn model(&self) -> &Arc<ModelParams<f32>> {
        &self.model
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn clicks(&self) -> &ClickLog {
        &self.clicks
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.labels.num_classes()
    }

    pub fn events(&self) -> &[SessionEvent] {
        &self.events
    }

    /// Event log as newline-delimited JSON.
    pub fn event_log(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("events serialize"));
            out.push('\n');
        }
        out
    }

    fn require(&self, allowed: &[Phase], action: &str) -> Result<()> {
        if self.phase == Phase::Training {
            return Err(Error::Busy);
        }
        if allowed.contains(&self.phase) {
            Ok(())
        } else {
            Err(Error::Phase { phase: self.phase.to_string(), message: format!("cannot {action}") })
        }
    }

    fn check_points(&self, items: &[(usize, ClassId)]) -> Result<()> {
        let mut seen: HashMap<usize, ClassId> = HashMap::with_capacity(items.len());
        for &(p, c) in items {
            if p >= self.cloud.len() {
                return Err(Error::invalid(format!("point {p} out of range for {} points", self.cloud.len())));
            }
            if usize::from(c) >= self.num_classes() {
                return Err(Error::invalid(format!("class {c} out of range for {} classes", self.num_classes())));
            }
            if seen.insert(p, c).is_some() {
                return Err(Error::invalid(format!("point {p} appears twice; a point has one label")));
            }
        }
        Ok(())
    }

    fn clicks_for(&self, kind: ClickKind, items: &[(usize, ClassId)]) -> Vec<Click> {
        let timestamp = self.events.len() as u64;
        items
            .iter()
            .map(|&(point_id, class_id)| Click { kind, point_id, class_id, round: self.round, timestamp })
            .collect()
    }

    /// Labels that [`Session::submit_seeds`] would produce, without changing the session.
    pub fn preview_seeds(&self, seeds: &[(usize, ClassId)]) -> Result<LabelMap> {
        self.require(&[Phase::Seeding], "preview seeds")?;
        self.check_points(seeds)?;
        let mut covered = vec![false; self.num_classes()];
        for &(_, c) in seeds {
            covered[usize::from(c)] = true;
        }
        if let Some(missing) = covered.iter().position(|c| !c) {
            return Err(Error::invalid(format!("class {missing} has no seed")));
        }
        let mut labels = self.labels.clone();
        for &(p, c) in seeds {
            labels.set(p, c, Provenance::Seed)?;
        }
        grow_regions(&self.cloud, &labels, &self.config.grow, &self.index)
    }

    /// Places the initial seeds (one click each) and grows them immediately.
    pub fn submit_seeds(&mut self, seeds: &[(usize, ClassId)]) -> Result<()> {
        let labels = self.preview_seeds(seeds)?;
        self.clicks.extend(self.clicks_for(ClickKind::Seed, seeds));
        self.labels = labels;
        self.phase = Phase::Growing;
        self.events.push(SessionEvent::Seeds { seeds: seeds.to_vec() });
        Ok(())
    }

    /// Labels points as `Corrected` (one click each), optionally growing each correction over
    /// points whose label is not human-given.
    pub fn submit_corrections(&mut self, corrections: &[(usize, ClassId)], expand: bool) -> Result<()> {
        self.require(&[Phase::Reviewing, Phase::Correcting], "submit corrections")?;
        if corrections.is_empty() {
            return Err(Error::invalid("no corrections given; finalize instead"));
        }
        self.check_points(corrections)?;
        let mut labels = self.labels.clone();
        for &(p, c) in corrections {
            match labels.get(p) {
                Some(Label { provenance: Provenance::Seed, class }) if class != c => {
                    return Err(Error::invalid(format!("point {p} is seeded as class {class}")));
                }
                Some(Label { provenance: Provenance::Seed, .. }) => {}
                _ => labels.set(p, c, Provenance::Corrected)?,
            }
        }
        if expand {
            let sources: Vec<usize> = corrections.iter().map(|&(p, _)| p).collect();
            labels = grow_from(
                &self.cloud,
                &labels,
                &sources,
                &self.config.grow,
                &self.index,
                |e| e.map_or(true, |l| l.provenance.authority() < Provenance::Seed.authority()),
                Provenance::Grown,
            )?;
        }

        self.clicks.extend(self.clicks_for(ClickKind::Correction, corrections));
        self.labels = labels;
        self.phase = Phase::Correcting;
        self.events.push(SessionEvent::Corrections { corrections: corrections.to_vec(), expand });
        Ok(())
    }

    fn begin(&mut self, kind: JobKind) -> Result<TrainingJob> {
        self.tickets += 1;
        let job = TrainingJob {
            kind,
            round: self.round,
            params: Arc::clone(&self.model),
            cloud: Arc::clone(&self.cloud),
            labels: self.labels.clone(),
            config: self.config.train.clone(),
            ticket: self.tickets,
        };
        self.resume = self.phase;
        self.phase = Phase::Training;
        Ok(job)
    }

    /// Moves into `Training` and hands out the fine-tuning job for the current round.
    pub fn begin_training(&mut self) -> Result<TrainingJob> {
        self.require(&[Phase::Growing, Phase::Reviewing, Phase::Correcting], "train")?;
        if self.labels.supervised_ids().is_empty() {
            return Err(Error::invalid("no supervised labels to train on"));
        }
        self.begin(JobKind::Round)
    }

    /// Moves into `Training` and hands out the final full-cloud retrain.
    pub fn begin_finalize(&mut self) -> Result<TrainingJob> {
        self.require(&[Phase::Reviewing, Phase::Correcting], "finalize")?;
        if !self.labels.is_full() {
            let missing = self.labels.len() - self.labels.labeled_count();
            return Err(Error::invalid(format!("{missing} points are still unlabeled")));
        }
        self.begin(JobKind::Final)
    }

    /// Applies a finished job. Predictions replace every label that is not human-given.
    pub fn complete_job(&mut self, output: JobOutput) -> Result<()> {
        if self.phase != Phase::Training || output.ticket != self.tickets {
            return Err(Error::Phase {
                phase: self.phase.to_string(),
                message: "no matching training job is running".into(),
            });
        }
        match output.kind {
            JobKind::Round => {
                let predictions = output.predictions.expect("round jobs predict");
                let mut labels = self.labels.clone();
                for (i, &c) in predictions.iter().enumerate() {
                    let human = labels.get(i).is_some_and(|l| l.provenance.authority() >= Provenance::Seed.authority());
                    if !human {
                        labels.set(i, c, Provenance::Predicted)?;
                    }
                }
                self.events.push(SessionEvent::Train { round: self.round });
                self.labels = labels;
                self.round += 1;
                self.phase = Phase::Reviewing;
            }
            JobKind::Final => {
                self.events.push(SessionEvent::Finalize);
                self.phase = Phase::Finalized;
            }
        }
        self.model = Arc::new(output.params);
        Ok(())
    }

    /// Abandons a running job, restoring the phase it started from.
    pub fn abort_job(&mut self) {
        if self.phase == Phase::Training {
            self.phase = self.resume;
        }
    }

    /// Fine-tunes for one round and predicts every non-human label.
    pub fn train_and_predict(&mut self) -> Result<()> {
        self.train_and_predict_with_progress(|_| {})
    }

    pub fn train_and_predict_with_progress(&mut self, progress: impl FnMut(TrainProgress)) -> Result<()> {
        let job = self.begin_training()?;
        self.run_job(job, progress)
    }

    /// Retrains on the full labeling and closes the session; the resulting model is the new
    /// base model for later sessions.
    pub fn finalize(&mut self) -> Result<()> {
        let job = self.begin_finalize()?;
        self.run_job(job, |_| {})
    }

    fn run_job(&mut self, job: TrainingJob, progress: impl FnMut(TrainProgress)) -> Result<()> {
        match job.run(progress) {
            Ok(out) => self.complete_job(out),
            Err(e) => {
                self.abort_job();
                Err(e)
            }
        }
    }

    /// Rebuilds a session from its event log by re-running every operation.
    pub fn replay(cloud: PointCloud, base_model: Option<&ModelParams<f32>>, log: &str) -> Result<Self> {
        let events = parse_event_log(log)?;
        let mut iter = events.into_iter();
        let Some(SessionEvent::Create { session_id, cloud_id: _, points, num_classes, config, base_model: digest }) =
            iter.next()
        else {
            return Err(Error::format("event log must start with a create record"));
        };
        if points != cloud.len() {
            return Err(Error::format(format!("log expects {points} points, cloud has {}", cloud.len())));
        }
        if digest != base_model.map(model_digest) {
            return Err(Error::format("base model does not match the logged digest"));
        }
        let mut session = Session::create(session_id, cloud, num_classes, base_model, config)?;
        for event in iter {
            match event {
                SessionEvent::Create { .. } => return Err(Error::format("duplicate create record")),
                SessionEvent::Seeds { seeds } => session.submit_seeds(&seeds)?,
                SessionEvent::Train { round } => {
                    if round != session.round {
                        return Err(Error::format(format!("log trains round {round}, session is at {}", session.round)));
                    }
                    session.train_and_predict()?
                }
                SessionEvent::Corrections { corrections, expand } => session.submit_corrections(&corrections, expand)?,
                SessionEvent::Finalize => session.finalize()?,
            }
        }
        Ok(session)
    }
}

/// Parses newline-delimited session events; blank lines are ignored.
pub fn parse_event_log(log: &str) -> Result<Vec<SessionEvent>> {
    log.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(i + 1, e)))
        .collect()
}

//! Simulated annotator, the manual painting baseline and evaluation metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{dist, Neighborhood, PointCloud, SpatialIndex};
use crate::labels::{ClassId, LabelMap};
use crate::nnet::ModelParams;
use crate::session::{ClickKind, Session, SessionConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OraclePolicy {
    pub seeds_per_class: usize,
    /// Blob corrections issued per review.
    pub corrections_per_round: usize,
    /// Agreement with ground truth at which the annotator stops the loop.
    pub completion_threshold: f64,
    /// Grow every correction over non-human labels (still one click).
    pub expand_corrections: bool,
    /// When at most this many points remain wrong they are corrected one by one and the
    /// session is finalized without another training pass.
    pub sweep_below: usize,
    /// Training passes allowed before giving up.
    pub max_rounds: usize,
}

impl Default for OraclePolicy {
    fn default() -> Self {
        Self {
            seeds_per_class: 1,
            corrections_per_round: 16,
            completion_threshold: 1.0,
            expand_corrections: false,
            sweep_below: 16,
            max_rounds: 50,
        }
    }
}

impl OraclePolicy {
    pub fn validate(&self) -> Result<()> {
        if self.seeds_per_class == 0 || self.corrections_per_round == 0 {
            return Err(Error::invalid("seed and correction budgets must be at least 1"));
        }
        if !(self.completion_threshold > 0.0 && self.completion_threshold <= 1.0) {
            return Err(Error::invalid("completion_threshold must lie in (0, 1]"));
        }
        if self.max_rounds == 0 {
            return Err(Error::invalid("max_rounds must be at least 1"));
        }
        Ok(())
    }
}

/// Agreement metrics after one training pass, and the clicks spent reviewing it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub accuracy: f64,
    pub miou: f64,
    /// Correction clicks issued while reviewing this round.
    pub clicks: usize,
    pub clicks_cumulative: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cloud_id: String,
    pub seed_clicks: usize,
    pub correction_clicks: usize,
    pub total_clicks: usize,
    pub rounds_to_completion: usize,
    pub rounds: Vec<RoundRecord>,
    /// Agreement of the finalized labels with ground truth.
    pub final_accuracy: f64,
}

impl EvalReport {
    /// Correction clicks spent after the first training pass.
    pub fn first_round_corrections(&self) -> usize {
        self.rounds.first().map_or(0, |r| r.clicks)
    }

    /// One row per round: `round,clicks_cumulative,accuracy,miou`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,clicks_cumulative,accuracy,miou\n");
        for r in &self.rounds {
            let _ = writeln!(out, "{},{},{:.6},{:.6}", r.round, r.clicks_cumulative, r.accuracy, r.miou);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// A finished simulation: the report plus the finalized session (whose model is the
/// retrained base model).
#[derive(Debug, Clone)]
pub struct Simulation {
    pub report: EvalReport,
    pub session: Session,
}

/// Point accuracy and mean IoU over the classes present in `ground_truth`.
///
/// Unlabeled predictions count as wrong.
pub fn evaluate(predicted: &LabelMap, ground_truth: &LabelMap) -> Result<(f64, f64)> {
    if predicted.len() != ground_truth.len() || predicted.num_classes() != ground_truth.num_classes() {
        return Err(Error::invalid("predicted and ground-truth labels differ in length or class count"));
    }
    let truth = ground_truth.dense_classes()?;
    let c = ground_truth.num_classes();
    let mut inter = vec![0usize; c];
    let mut pred_count = vec![0usize; c];
    let mut true_count = vec![0usize; c];
    let mut correct = 0usize;
    for (i, &t) in truth.iter().enumerate() {
        true_count[usize::from(t)] += 1;
        if let Some(p) = predicted.class(i) {
            pred_count[usize::from(p)] += 1;
            if p == t {
                inter[usize::from(t)] += 1;
                correct += 1;
            }
        }
    }
    let present: Vec<usize> = (0..c).filter(|&k| true_count[k] > 0).collect();
    let miou = present
        .iter()
        .map(|&k| inter[k] as f64 / (true_count[k] + pred_count[k] - inter[k]) as f64)
        .sum::<f64>()
        / present.len() as f64;
    Ok((correct as f64 / truth.len() as f64, miou))
}

/// Member of `ids` minimizing summed distance to the others; ties go to the lowest id.
pub fn medoid(cloud: &PointCloud, ids: &[usize]) -> Option<usize> {
    let pts = cloud.positions();
    let mut best: Option<(f64, usize)> = None;
    for &i in ids {
        let total: f64 = ids.iter().map(|&j| dist(&pts[i], &pts[j])).sum();
        let better = match best {
            None => true,
            Some((b, bi)) => total < b || (total == b && i < bi),
        };
        if better {
            best = Some((total, i));
        }
    }
    best.map(|(_, i)| i)
}

/// `s` seeds per class: the class medoid, then farthest-point samples within the class.
pub fn select_seeds(cloud: &PointCloud, ground_truth: &LabelMap, policy: &OraclePolicy) -> Result<Vec<(usize, ClassId)>> {
    policy.validate()?;
    if ground_truth.len() != cloud.len() {
        return Err(Error::invalid("ground truth length differs from the cloud"));
    }
    let truth = ground_truth.dense_classes()?;
    let pts = cloud.positions();
    let mut seeds = Vec::new();
    for class in 0..ground_truth.num_classes() {
        let members: Vec<usize> = (0..truth.len()).filter(|&i| usize::from(truth[i]) == class).collect();
        let Some(first) = medoid(cloud, &members) else {
            return Err(Error::invalid(format!("class {class} is absent from the ground truth")));
        };
        let mut chosen = vec![first];
        let mut nearest: Vec<f64> = members.iter().map(|&i| dist(&pts[i], &pts[first])).collect();
        while chosen.len() < policy.seeds_per_class.min(members.len()) {
            let (k, _) = nearest
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (k, &d)| if d > acc.1 { (k, d) } else { acc });
            let next = members[k];
            chosen.push(next);
            for (m, d) in members.iter().zip(nearest.iter_mut()) {
                *d = d.min(dist(&pts[*m], &pts[next]));
            }
        }
        seeds.extend(chosen.into_iter().map(|p| (p, class as ClassId)));
    }
    Ok(seeds)
}

/// Connected groups of mispredicted points under the KNN(8) graph, linking two points only
/// when both are wrong and share the ground-truth class. Largest first, ties by lowest id.
pub fn mispredicted_blobs(predicted: &LabelMap, truth: &[ClassId], index: &SpatialIndex) -> Result<Vec<Vec<usize>>> {
    let n = truth.len();
    let wrong: Vec<bool> = (0..n).map(|i| predicted.class(i) != Some(truth[i])).collect();
    // symmetric adjacency so blobs do not depend on which endpoint is visited first
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in (0..n).filter(|&i| wrong[i]) {
        for j in index.neighbors_of(i, Neighborhood::Knn { k: 8 })? {
            if wrong[j] && truth[j] == truth[i] {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    let mut seen = vec![false; n];
    let mut blobs = Vec::new();
    for start in 0..n {
        if !wrong[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut blob = vec![start];
        let mut head = 0;
        while head < blob.len() {
            let i = blob[head];
            head += 1;
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    blob.push(j);
                }
            }
        }
        blob.sort_unstable();
        blobs.push(blob);
    }
    blobs.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    Ok(blobs)
}

/// Medoids of the `b` largest mispredicted blobs with their true classes. Empty once
/// agreement reaches the completion threshold.
pub fn select_corrections(
    predicted: &LabelMap,
    ground_truth: &LabelMap,
    cloud: &PointCloud,
    policy: &OraclePolicy,
) -> Result<Vec<(usize, ClassId)>> {
    select_corrections_indexed(predicted, ground_truth, cloud, &SpatialIndex::build(cloud), policy)
}

pub fn select_corrections_indexed(
    predicted: &LabelMap,
    ground_truth: &LabelMap,
    cloud: &PointCloud,
    index: &SpatialIndex,
    policy: &OraclePolicy,
) -> Result<Vec<(usize, ClassId)>> {
    let (accuracy, _) = evaluate(predicted, ground_truth)?;
    if accuracy >= policy.completion_threshold {
        return Ok(Vec::new());
    }
    let truth = ground_truth.dense_classes()?;
    let blobs = mispredicted_blobs(predicted, &truth, index)?;
    Ok(blobs
        .iter()
        .take(policy.corrections_per_round)
        .filter_map(|blob| medoid(cloud, blob))
        .map(|p| (p, truth[p]))
        .collect())
}

/// Clicks a perfect painter needs with the given brush: click the lowest-id wrong point and
/// paint it and every brush neighbor of the same true class.
pub fn manual_baseline_clicks(cloud: &PointCloud, ground_truth: &LabelMap, brush: Neighborhood) -> Result<usize> {
    brush.validate()?;
    let truth = ground_truth.dense_classes()?;
    if truth.len() != cloud.len() {
        return Err(Error::invalid("ground truth length differs from the cloud"));
    }
    let index = SpatialIndex::build(cloud);
    let mut painted = vec![false; truth.len()];
    let mut clicks = 0;
    for p in 0..truth.len() {
        if painted[p] {
            continue;
        }
        clicks += 1;
        painted[p] = true;
        for j in index.neighbors_of(p, brush)? {
            if truth[j] == truth[p] {
                painted[j] = true;
            }
        }
    }
    Ok(clicks)
}

/// Drives a full session from ground truth: seed, then train, review and correct until the
/// predictions agree with the truth, then finalize.
pub fn run_simulated_session(
    cloud: &PointCloud,
    ground_truth: &LabelMap,
    base_model: Option<&ModelParams<f32>>,
    policy: &OraclePolicy,
    config: &SessionConfig,
) -> Result<Simulation> {
    policy.validate()?;
    let truth = ground_truth.dense_classes()?;
    let seeds = select_seeds(cloud, ground_truth, policy)?;
    let mut session = Session::create(
        format!("sim-{}", cloud.id()),
        cloud.clone(),
        ground_truth.num_classes(),
        base_model,
        config.clone(),
    )?;
    session.submit_seeds(&seeds)?;

    let mut rounds = Vec::new();
    loop {
        if session.round() >= policy.max_rounds {
            return Err(Error::NotConverged(format!(
                "{} still disagrees with ground truth after {} rounds",
                cloud.id(),
                session.round()
            )));
        }
        session.train_and_predict()?;
        let (accuracy, miou) = evaluate(session.labels(), ground_truth)?;
        let wrong: Vec<(usize, ClassId)> = (0..truth.len())
            .filter(|&i| session.labels().class(i) != Some(truth[i]))
            .map(|i| (i, truth[i]))
            .collect();
        let done = accuracy >= policy.completion_threshold || wrong.len() <= policy.sweep_below;
        let corrections = if done {
            wrong
        } else {
            select_corrections_indexed(session.labels(), ground_truth, cloud, session.index(), policy)?
        };
        if !corrections.is_empty() {
            session.submit_corrections(&corrections, policy.expand_corrections && !done)?;
        }
        rounds.push(RoundRecord {
            round: session.round(),
            accuracy,
            miou,
            clicks: corrections.len(),
            clicks_cumulative: session.clicks().len(),
        });
        if done {
            break;
        }
    }
    session.finalize()?;

    let (final_accuracy, _) = evaluate(session.labels(), ground_truth)?;
    let clicks = session.clicks();
    let report = EvalReport {
        cloud_id: cloud.id().to_string(),
        seed_clicks: clicks.count(ClickKind::Seed),
        correction_clicks: clicks.count(ClickKind::Correction),
        total_clicks: clicks.len(),
        rounds_to_completion: session.round(),
        rounds,
        final_accuracy,
    };
    Ok(Simulation { report, session })
}

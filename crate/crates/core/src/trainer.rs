//! Optimization schedules: pretraining on fully labeled clouds, per-round fine-tuning on
//! partial labels, and the final full-cloud retrain.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{PointCloud, SpatialIndex};
use crate::labels::LabelMap;
use crate::nnet::{
    estimate_sigma, forward, forward_cached, knn_lists, loss_and_grad_from_cache, positions_matrix,
    training_pairs, LossTerms, LossWeights, ModelParams, Supervision,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs_per_round: usize,
    pub pretrain_epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Transform-regularizer weight.
    pub alpha: f64,
    /// Smoothness weight per fine-tuning round; rounds past the end reuse the last entry.
    pub beta_schedule: Vec<f64>,
    /// Nearest neighbors paired with each point in the smoothness term.
    pub smooth_neighbors: usize,
    /// Uniformly random partners per point in the smoothness term.
    pub smooth_random_partners: usize,
    /// Pair budget for estimating the smoothness distance scale.
    pub sigma_sample_pairs: usize,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs_per_round: 30,
            pretrain_epochs: 50,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            alpha: LossWeights::default().alpha,
            beta_schedule: vec![1.0, 0.0],
            smooth_neighbors: 8,
            smooth_random_partners: 4,
            sigma_sample_pairs: 20_000,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.epochs_per_round == 0 || self.pretrain_epochs == 0 {
            return Err(Error::invalid("epoch counts must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::invalid("adam decay rates must lie in [0, 1)"));
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::invalid("adam_epsilon must be positive"));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::invalid("alpha must be non-negative"));
        }
        if self.beta_schedule.is_empty() || self.beta_schedule.iter().any(|b| !(*b >= 0.0)) {
            return Err(Error::invalid("beta_schedule must be non-empty and non-negative"));
        }
        if self.smooth_neighbors == 0 || self.sigma_sample_pairs == 0 {
            return Err(Error::invalid("smoothness sampling sizes must be at least 1"));
        }
        Ok(())
    }

    /// Smoothness weight for a fine-tuning round, clamped to the last schedule entry.
    pub fn beta_for_round(&self, round: usize) -> f64 {
        let last = self.beta_schedule.len().saturating_sub(1);
        self.beta_schedule.get(round.min(last)).copied().unwrap_or(0.0)
    }

    fn stream(&self, purpose: u64, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(index);
        rng
    }
}

/// Progress of a running job, reported once per epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainProgress {
    pub epoch: usize,
    pub epochs: usize,
    pub loss: LossTerms<f32>,
}

/// Adam optimizer state.
struct Adam {
    m: ModelParams<f32>,
    v: ModelParams<f32>,
    t: i32,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
}

impl Adam {
    fn new(params: &ModelParams<f32>, config: &TrainConfig) -> Self {
        Self {
            m: ModelParams::zeros(params.num_classes()),
            v: ModelParams::zeros(params.num_classes()),
            t: 0,
            lr: config.learning_rate,
            b1: config.adam_beta1,
            b2: config.adam_beta2,
            eps: config.adam_epsilon,
        }
    }

    fn step(&mut self, params: &mut ModelParams<f32>, grad: &ModelParams<f32>) {
        self.t += 1;
        let (b1, b2) = (self.b1 as f32, self.b2 as f32);
        let c1 = 1.0 - self.b1.powi(self.t);
        let c2 = 1.0 - self.b2.powi(self.t);
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        let grads = grad.tensors();
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                p[k] -= step * m[k] / (v[k].sqrt() + eps);
            }
        }
    }
}

/// Supervision plus cached geometry for repeated steps on one cloud.
struct Problem<'a> {
    cloud: &'a PointCloud,
    sup: Supervision,
    weights: LossWeights,
    sigma: f64,
    neighbors: Vec<Vec<usize>>,
    random_partners: usize,
}

impl<'a> Problem<'a> {
    fn new(cloud: &'a PointCloud, sup: Supervision, beta: f64, config: &TrainConfig) -> Result<Self> {
        let weights = LossWeights {
            alpha: config.alpha,
            beta,
        };
        let (sigma, neighbors) = if beta > 0.0 && cloud.len() > 1 {
            let sigma = estimate_sigma(cloud, config.sigma_sample_pairs, config.rng_seed)?;
            let index = SpatialIndex::build(cloud);
            (sigma, knn_lists(&index, config.smooth_neighbors)?)
        } else {
            (1.0, Vec::new())
        };
        Ok(Self {
            cloud,
            sup,
            weights,
            sigma,
            neighbors,
            random_partners: config.smooth_random_partners,
        })
    }

    fn step(&self, params: &mut ModelParams<f32>, adam: &mut Adam, rng: &mut ChaCha8Rng) -> LossTerms<f32> {
        let pairs = if self.neighbors.is_empty() {
            Vec::new()
        } else {
            training_pairs(&self.neighbors, self.random_partners, rng)
        };
        let act = forward_cached(params, positions_matrix(self.cloud));
        let (terms, grad) = loss_and_grad_from_cache(
            params,
            &act,
            self.cloud.positions(),
            &self.sup,
            self.weights.into(),
            self.sigma,
            &pairs,
        );
        adam.step(params, &grad);
        terms
    }
}

/// Fraction of points whose argmax prediction equals `truth`.
pub fn accuracy(params: &ModelParams<f32>, cloud: &PointCloud, truth: &LabelMap) -> Result<f64> {
    let (logits, _) = forward(params, cloud)?;
    let pred = logits.argmax();
    let correct = pred
        .iter()
        .enumerate()
        .filter(|(i, &p)| truth.class(*i) == Some(p as u16))
        .count();
    Ok(correct as f64 / cloud.len() as f64)
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub params: ModelParams<f32>,
    /// Mean per-cloud accuracy on the training set after the last epoch.
    pub train_accuracy: f64,
}

/// Trains a fresh network with full supervision (no smoothness term), one cloud per step.
pub fn pretrain(dataset: &[(PointCloud, LabelMap)], config: &TrainConfig) -> Result<PretrainReport> {
    pretrain_with_progress(dataset, config, &mut |_| {})
}

pub fn pretrain_with_progress(
    dataset: &[(PointCloud, LabelMap)],
    config: &TrainConfig,
    progress: &mut dyn FnMut(TrainProgress),
) -> Result<PretrainReport> {
    config.validate()?;
    let (_, first) = dataset.first().ok_or_else(|| Error::invalid("pretraining dataset is empty"))?;
    let c = first.num_classes();
    for (i, (cloud, labels)) in dataset.iter().enumerate() {
        if labels.num_classes() != c {
            return Err(Error::invalid(format!(
                "cloud {i} has {} classes, expected {c}",
                labels.num_classes()
            )));
        }
        if labels.len() != cloud.len() || !labels.is_full() {
            return Err(Error::invalid(format!("cloud {i} is not fully labeled")));
        }
    }
    let mut params = crate::nnet::init_or_resize_head(None, c, config.rng_seed)?;
    let mut adam = Adam::new(&params, config);
    let problems = dataset
        .iter()
        .map(|(cloud, labels)| Problem::new(cloud, full_supervision(labels)?, 0.0, config))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut shuffle_rng = config.stream(1, 0);
    let mut pair_rng = config.stream(2, 0);
    for epoch in 0..config.pretrain_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = LossTerms {
            segment: 0.0,
            transform: 0.0,
            smooth: 0.0,
            total: 0.0,
        };
        for &k in &order {
            let t = problems[k].step(&mut params, &mut adam, &mut pair_rng);
            sum.segment += t.segment;
            sum.transform += t.transform;
            sum.total += t.total;
        }
        let m = order.len() as f32;
        progress(TrainProgress {
            epoch: epoch + 1,
            epochs: config.pretrain_epochs,
            loss: LossTerms {
                segment: sum.segment / m,
                transform: sum.transform / m,
                smooth: 0.0,
                total: sum.total / m,
            },
        });
    }
    let mut acc = 0.0;
    for (cloud, labels) in dataset {
        acc += accuracy(&params, cloud, labels)?;
    }
    Ok(PretrainReport {
        params,
        train_accuracy: acc / dataset.len() as f64,
    })
}

fn full_supervision(labels: &LabelMap) -> Result<Supervision> {
    let classes = labels.dense_classes()?;
    Ok(Supervision {
        ids: (0..classes.len()).collect(),
        classes: classes.into_iter().map(usize::from).collect(),
    })
}

fn check_compatible(params: &ModelParams<f32>, cloud: &PointCloud, labels: &LabelMap) -> Result<()> {
    if labels.len() != cloud.len() {
        return Err(Error::invalid("label count differs from cloud size"));
    }
    if labels.num_classes() != params.num_classes() {
        return Err(Error::invalid(format!(
            "labels have {} classes but the model head has {}",
            labels.num_classes(),
            params.num_classes()
        )));
    }
    Ok(())
}

/// One fine-tuning round on a single cloud using Seed, Grown and Corrected labels as targets.
/// The smoothness weight comes from the round's entry in the beta schedule.
pub fn finetune_round(
    params: &ModelParams<f32>,
    cloud: &PointCloud,
    labels: &LabelMap,
    round: usize,
    config: &TrainConfig,
) -> Result<ModelParams<f32>> {
    finetune_round_with_progress(params, cloud, labels, round, config, &mut |_| {})
}

pub fn finetune_round_with_progress(
    params: &ModelParams<f32>,
    cloud: &PointCloud,
    labels: &LabelMap,
    round: usize,
    config: &TrainConfig,
    progress: &mut dyn FnMut(TrainProgress),
) -> Result<ModelParams<f32>> {
    config.validate()?;
    check_compatible(params, cloud, labels)?;
    let sup = Supervision::from_labels(labels)?;
    let problem = Problem::new(cloud, sup, config.beta_for_round(round), config)?;
    run_epochs(params, &problem, config.epochs_per_round, config.stream(3, round as u64), config, progress)
}

/// Retrains on every point of a fully labeled cloud, without smoothness, for twice the
/// per-round epoch count.
pub fn final_retrain(
    params: &ModelParams<f32>,
    cloud: &PointCloud,
    labels: &LabelMap,
    config: &TrainConfig,
) -> Result<ModelParams<f32>> {
    final_retrain_with_progress(params, cloud, labels, config, &mut |_| {})
}

pub fn final_retrain_with_progress(
    params: &ModelParams<f32>,
    cloud: &PointCloud,
    labels: &LabelMap,
    config: &TrainConfig,
    progress: &mut dyn FnMut(TrainProgress),
) -> Result<ModelParams<f32>> {
    config.validate()?;
    check_compatible(params, cloud, labels)?;
    if !labels.is_full() {
        return Err(Error::invalid("final retrain requires every point to be labeled"));
    }
    let problem = Problem::new(cloud, full_supervision(labels)?, 0.0, config)?;
    run_epochs(params, &problem, 2 * config.epochs_per_round, config.stream(4, 0), config, progress)
}

fn run_epochs(
    params: &ModelParams<f32>,
    problem: &Problem<'_>,
    epochs: usize,
    mut rng: ChaCha8Rng,
    config: &TrainConfig,
    progress: &mut dyn FnMut(TrainProgress),
) -> Result<ModelParams<f32>> {
    let mut out = params.clone();
    let mut adam = Adam::new(&out, config);
    for epoch in 0..epochs {
        let loss = problem.step(&mut out, &mut adam, &mut rng);
        progress(TrainProgress {
            epoch: epoch + 1,
            epochs,
            loss,
        });
    }
    if !out.is_finite() {
        return Err(Error::invalid("training diverged to non-finite parameters"));
    }
    Ok(out)
}

//! Training objective: masked cross entropy, input-transform orthogonality penalty and
//! distance-weighted pairwise KL smoothness.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{forward_cached, positions_matrix, Activations};
use super::{backward, real, Logits, ModelParams, Real};
use crate::error::{Error, Result};
use crate::geom::{dist, Neighborhood, Point3, PointCloud, SpatialIndex};
use crate::labels::LabelMap;

/// Lower clamp for the distance scale of the smoothness weights.
pub const SIGMA_MIN: f64 = 1e-4;

/// Weights of the transform (`alpha`) and smoothness (`beta`) terms relative to cross entropy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.001, beta: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Individual and combined loss values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms<T> {
    pub segment: T,
    pub transform: T,
    pub smooth: T,
    pub total: T,
}

/// Points that act as training targets.
#[derive(Debug, Clone)]
pub(crate) struct Supervision {
    pub ids: Vec<usize>,
    pub classes: Vec<usize>,
}

impl Supervision {
    pub fn from_labels(labels: &LabelMap) -> Result<Self> {
        let ids = labels.supervised_ids();
        if ids.is_empty() {
            return Err(Error::invalid("no labeled points available as supervision"));
        }
        let classes = ids
            .iter()
            .map(|&i| labels.class(i).expect("supervised ids are labeled") as usize)
            .collect();
        Ok(Self { ids, classes })
    }
}

fn segment_terms<T: Real>(log_p: &Array2<T>, sup: &Supervision) -> (T, Array2<T>) {
    let m: T = real(sup.ids.len() as f64);
    let mut loss = T::zero();
    let mut grad = Array2::zeros(log_p.raw_dim());
    for (&i, &c) in sup.ids.iter().zip(&sup.classes) {
        loss = loss - log_p[[i, c]];
        for k in 0..log_p.ncols() {
            grad[[i, k]] = log_p[[i, k]].exp() / m;
        }
        grad[[i, c]] = grad[[i, c]] - T::one() / m;
    }
    (loss / m, grad)
}

/// Mean cross entropy over points whose labels may supervise (unlabeled and predicted
/// points are ignored).
pub fn segment_loss<T: Real>(logits: &Logits<T>, labels: &LabelMap) -> Result<T> {
    if labels.len() != logits.num_points() {
        return Err(Error::invalid("label count differs from logit rows"));
    }
    let sup = Supervision::from_labels(labels)?;
    if sup.classes.iter().any(|&c| c >= logits.num_classes()) {
        return Err(Error::invalid("label class exceeds logit width"));
    }
    Ok(segment_terms(&logits.log_softmax(), &sup).0)
}

fn transform_terms<T: Real>(a: &Array2<T>) -> (T, Array2<T>) {
    let mut e = a.dot(&a.t());
    for k in 0..3 {
        e[[k, k]] = e[[k, k]] - T::one();
    }
    let value = e.iter().fold(T::zero(), |acc, &v| acc + v * v);
    let grad = e.dot(a) * real::<T>(4.0);
    (value, grad)
}

/// Squared Frobenius distance of `A Aᵀ` from the identity.
pub fn transform_reg<T: Real>(a: &Array2<T>) -> T {
    transform_terms(a).0
}

fn pair_offset(i: usize, n: usize, include_self: bool) -> usize {
    // number of pairs in rows before i
    if include_self {
        i * n - i * i.saturating_sub(1) / 2
    } else {
        i * (n - 1) - i * i.saturating_sub(1) / 2
    }
}

fn decode_pair(k: usize, n: usize, include_self: bool) -> (usize, usize) {
    let rows = if include_self { n } else { n - 1 };
    let (mut lo, mut hi) = (0usize, rows - 1);
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if pair_offset(mid, n, include_self) <= k {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let i = lo;
    let first = if include_self { i } else { i + 1 };
    (i, first + (k - pair_offset(i, n, include_self)))
}

/// Draws `count` distinct unordered pairs `(i, j)` with `j >= i` (or `j > i` when
/// `include_self` is false) uniformly at random. Returns every pair, in row order, when
/// `count` covers them all.
pub fn sample_pairs(n: usize, count: usize, include_self: bool, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let total = if include_self { n * (n + 1) / 2 } else { n * n.saturating_sub(1) / 2 };
    if total == 0 {
        return Vec::new();
    }
    if count >= total {
        return (0..total).map(|k| decode_pair(k, n, include_self)).collect();
    }
    rand::seq::index::sample(rng, total, count)
        .into_iter()
        .map(|k| decode_pair(k, n, include_self))
        .collect()
}

/// Population variance of pairwise point distances, clamped below by [`SIGMA_MIN`].
///
/// Exact over all pairs when there are at most `sample_pairs` of them, otherwise estimated
/// from that many distinct random pairs.
pub fn estimate_sigma(cloud: &PointCloud, sample_pairs_count: usize, rng_seed: u64) -> Result<f64> {
    let n = cloud.len();
    if n < 2 {
        return Err(Error::invalid("sigma needs at least two points"));
    }
    if sample_pairs_count == 0 {
        return Err(Error::invalid("sample_pairs must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let pts = cloud.positions();
    let pairs = sample_pairs(n, sample_pairs_count, false, &mut rng);
    let d: Vec<f64> = pairs.iter().map(|&(i, j)| dist(&pts[i], &pts[j])).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64;
    Ok(var.max(SIGMA_MIN))
}

/// The `k` nearest neighbors of every point.
pub fn knn_lists(index: &SpatialIndex, k: usize) -> Result<Vec<Vec<usize>>> {
    (0..index.len())
        .map(|i| index.neighbors_of(i, Neighborhood::Knn { k }))
        .collect()
}

/// Smoothness pairs for one training step: each point with its precomputed neighbors plus
/// `random_partners` uniformly drawn points.
pub fn training_pairs(neighbors: &[Vec<usize>], random_partners: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let n = neighbors.len();
    let mut pairs = Vec::with_capacity(n * (random_partners + neighbors.first().map_or(0, Vec::len)));
    for (i, nb) in neighbors.iter().enumerate() {
        pairs.extend(nb.iter().map(|&j| (i, j)));
        for _ in 0..random_partners {
            pairs.push((i, rng.gen_range(0..n)));
        }
    }
    pairs
}

fn smooth_terms<T: Real>(
    log_p: &Array2<T>,
    positions: &[Point3],
    sigma: f64,
    pairs: &[(usize, usize)],
) -> (T, Array2<T>) {
    let mut grad = Array2::zeros(log_p.raw_dim());
    if pairs.is_empty() {
        return (T::zero(), grad);
    }
    let c = log_p.ncols();
    let scale: T = real(1.0 / pairs.len() as f64);
    let mut total = T::zero();
    for &(i, j) in pairs {
        if i == j {
            continue;
        }
        let w: T = real((-dist(&positions[i], &positions[j]) / sigma).exp());
        let li = log_p.row(i);
        let lj = log_p.row(j);
        let mut kl = T::zero();
        for k in 0..c {
            kl = kl + li[k].exp() * (li[k] - lj[k]);
        }
        total = total + w * kl;
        let ws = w * scale;
        for k in 0..c {
            let pi = li[k].exp();
            let pj = lj[k].exp();
            grad[[i, k]] = grad[[i, k]] + ws * pi * ((li[k] - lj[k]) - kl);
            grad[[j, k]] = grad[[j, k]] + ws * (pj - pi);
        }
    }
    (total * scale, grad)
}

/// Mean over `pairs` of `KL(p_i || p_j) * exp(-|pos_i - pos_j| / sigma)`.
pub fn smoothness_loss<T: Real>(
    logits: &Logits<T>,
    cloud: &PointCloud,
    sigma: f64,
    pairs: &[(usize, usize)],
) -> Result<T> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if pairs.is_empty() {
        return Err(Error::invalid("smoothness loss needs at least one pair"));
    }
    let n = cloud.len();
    if logits.num_points() != n {
        return Err(Error::invalid("logit rows differ from cloud size"));
    }
    if pairs.iter().any(|&(i, j)| i >= n || j >= n) {
        return Err(Error::invalid("pair index out of range"));
    }
    Ok(smooth_terms(&logits.log_softmax(), cloud.positions(), sigma, pairs).0)
}

/// Per-term multipliers for [`objective`]. The training loss fixes `segment` at 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    pub segment: f64,
    pub transform: f64,
    pub smooth: f64,
}

impl From<LossWeights> for TermWeights {
    fn from(w: LossWeights) -> Self {
        Self {
            segment: 1.0,
            transform: w.alpha,
            smooth: w.beta,
        }
    }
}

pub(crate) fn loss_and_grad_from_cache<T: Real>(
    params: &ModelParams<T>,
    act: &Activations<T>,
    positions: &[Point3],
    sup: &Supervision,
    weights: TermWeights,
    sigma: f64,
    pairs: &[(usize, usize)],
) -> (LossTerms<T>, ModelParams<T>) {
    let log_p = Logits::new(act.logits.clone()).log_softmax();
    let (segment, d_segment) = segment_terms(&log_p, sup);
    let (transform, d_a) = transform_terms(&act.a);
    let w_seg: T = real(weights.segment);
    let w_tr: T = real(weights.transform);
    let w_sm: T = real(weights.smooth);
    let mut d_logits = d_segment * w_seg;
    let smooth = if weights.smooth > 0.0 {
        let (smooth, d_smooth) = smooth_terms(&log_p, positions, sigma, pairs);
        d_logits.scaled_add(w_sm, &d_smooth);
        smooth
    } else {
        T::zero()
    };
    let grad = backward(params, act, &d_logits, &(d_a * w_tr));
    let terms = LossTerms {
        segment,
        transform,
        smooth,
        total: w_seg * segment + w_tr * transform + w_sm * smooth,
    };
    (terms, grad)
}

fn check_inputs<T: Real>(
    params: &ModelParams<T>,
    cloud: &PointCloud,
    labels: &LabelMap,
    smooth_active: bool,
    sigma: f64,
    pairs: &[(usize, usize)],
) -> Result<()> {
    if labels.len() != cloud.len() {
        return Err(Error::invalid("label count differs from cloud size"));
    }
    if labels.num_classes() != params.num_classes() {
        return Err(Error::invalid("label classes differ from model head width"));
    }
    if smooth_active {
        if !(sigma > 0.0) {
            return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
        }
        if pairs.iter().any(|&(i, j)| i >= cloud.len() || j >= cloud.len()) {
            return Err(Error::invalid("pair index out of range"));
        }
    }
    Ok(())
}

/// Weighted objective with arbitrary per-term weights, and its parameter gradient.
pub fn objective<T: Real>(
    params: &ModelParams<T>,
    cloud: &PointCloud,
    labels: &LabelMap,
    weights: TermWeights,
    sigma: f64,
    pairs: &[(usize, usize)],
) -> Result<(LossTerms<T>, ModelParams<T>)> {
    if !(weights.segment >= 0.0 && weights.transform >= 0.0 && weights.smooth >= 0.0) {
        return Err(Error::invalid("loss weights must be non-negative"));
    }
    check_inputs(params, cloud, labels, weights.smooth > 0.0, sigma, pairs)?;
    let sup = Supervision::from_labels(labels)?;
    let act = forward_cached(params, positions_matrix(cloud));
    Ok(loss_and_grad_from_cache(params, &act, cloud.positions(), &sup, weights, sigma, pairs))
}

/// Evaluates every loss term without computing gradients. `total` uses `weights`; the
/// smoothness term is evaluated whenever `pairs` is non-empty.
pub fn loss_terms<T: Real>(
    params: &ModelParams<T>,
    cloud: &PointCloud,
    labels: &LabelMap,
    weights: LossWeights,
    sigma: f64,
    pairs: &[(usize, usize)],
) -> Result<LossTerms<T>> {
    weights.validate()?;
    check_inputs(params, cloud, labels, !pairs.is_empty(), sigma, pairs)?;
    let sup = Supervision::from_labels(labels)?;
    let act = forward_cached(params, positions_matrix(cloud));
    let log_p = Logits::new(act.logits).log_softmax();
    let segment = segment_terms(&log_p, &sup).0;
    let transform = transform_terms(&act.a).0;
    let smooth = smooth_terms(&log_p, cloud.positions(), sigma, pairs).0;
    let (alpha, beta): (T, T) = (real(weights.alpha), real(weights.beta));
    Ok(LossTerms {
        segment,
        transform,
        smooth,
        total: segment + alpha * transform + beta * smooth,
    })
}

/// Evaluates `L_segment + alpha L_transform + beta L_smooth` and its gradient with respect to
/// every network parameter.
pub fn total_loss<T: Real>(
    params: &ModelParams<T>,
    cloud: &PointCloud,
    labels: &LabelMap,
    weights: LossWeights,
    sigma: f64,
    pairs: &[(usize, usize)],
) -> Result<(LossTerms<T>, ModelParams<T>)> {
    weights.validate()?;
    objective(params, cloud, labels, weights.into(), sigma, pairs)
}

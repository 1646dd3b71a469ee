//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use pcal_core::geom::PointCloud;
use pcal_core::labels::{LabelMap, Provenance};
use pcal_core::nnet::{init_or_resize_head, loss_terms, objective, LossWeights, ModelParams, TermWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_ball_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..n)
        .map(|_| loop {
            let p: [f32; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            if p.iter().map(|v| v * v).sum::<f32>() <= 1.0 {
                break p;
            }
        })
        .collect();
    PointCloud::new(format!("ball-{seed}"), pts).unwrap()
}

/// Brute-force neighbor scan: `(squared distance, id)` sorted by distance then id.
pub fn brute_force_sorted(points: &[[f32; 3]], center: &[f32; 3], exclude: Option<usize>) -> Vec<(f64, usize)> {
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, p)| ((0..3).map(|k| (p[k] as f64 - center[k] as f64).powi(2)).sum(), i))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all
}

/// Exact mean of the pairwise smoothness term over every pair `j >= i`.
pub fn exact_smoothness(probs: &[Vec<f64>], points: &[[f32; 3]], sigma: f64) -> f64 {
    let n = points.len();
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for j in i..n {
            let d: f64 = (0..3)
                .map(|k| (points[i][k] as f64 - points[j][k] as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            let kl: f64 = probs[i]
                .iter()
                .zip(&probs[j])
                .map(|(p, q)| p * (p.ln() - q.ln()))
                .sum();
            sum += kl * (-d / sigma).exp();
            count += 1;
        }
    }
    sum / count as f64
}

pub fn softmax_rows(logits: &[Vec<f64>]) -> Vec<Vec<f64>> {
    logits
        .iter()
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Setup for finite-difference gradient checks in 64-bit.
pub struct GradProblem {
    pub params: ModelParams<f64>,
    pub cloud: PointCloud,
    pub labels: LabelMap,
    pub sigma: f64,
    pub pairs: Vec<(usize, usize)>,
}

impl GradProblem {
    pub fn new(n: usize, c: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = init_or_resize_head(None, c, seed).unwrap().cast::<f64>();
        // non-zero biases exercise every path
        for l in params.layers_mut() {
            l.b.mapv_inplace(|_| rng.gen_range(-0.1..0.1));
        }
        let cloud = random_ball_cloud(n, seed + 100);
        let classes: Vec<Option<u16>> = (0..n)
            .map(|i| if i % 4 == 3 { None } else { Some(rng.gen_range(0..c as u16)) })
            .collect();
        let labels = LabelMap::from_optional(&classes, c, Provenance::Seed).unwrap();
        let mut pairs = Vec::new();
        for i in 0..n {
            for _ in 0..6 {
                pairs.push((i, rng.gen_range(0..n)));
            }
        }
        Self {
            params,
            cloud,
            labels,
            sigma: 0.3,
            pairs,
        }
    }

    /// The three loss term values at the given parameters.
    pub fn terms(&self, params: &ModelParams<f64>) -> [f64; 3] {
        let t = loss_terms(params, &self.cloud, &self.labels, LossWeights { alpha: 0.0, beta: 0.0 }, self.sigma, &self.pairs)
            .unwrap();
        [t.segment, t.transform, t.smooth]
    }

    /// Analytic gradients of each term on its own, flattened in canonical order.
    pub fn analytic(&self) -> [Vec<f64>; 3] {
        let one = |segment, transform, smooth| {
            let (_, g) = objective(
                &self.params,
                &self.cloud,
                &self.labels,
                TermWeights { segment, transform, smooth },
                self.sigma,
                &self.pairs,
            )
            .unwrap();
            g.tensors().into_iter().flatten().copied().collect::<Vec<f64>>()
        };
        [one(1.0, 0.0, 0.0), one(0.0, 1.0, 0.0), one(0.0, 0.0, 1.0)]
    }

    /// Central differences of every term with respect to the flat parameters at `indices`.
    pub fn numeric(&self, indices: &[usize], h: f64) -> [Vec<f64>; 3] {
        let mut out = [Vec::new(), Vec::new(), Vec::new()];
        let mut work = self.params.clone();
        for &flat in indices {
            let (t, k) = locate(&work, flat);
            let orig = work.tensors()[t][k];
            work.tensors_mut()[t][k] = orig + h;
            let plus = self.terms(&work);
            work.tensors_mut()[t][k] = orig - h;
            let minus = self.terms(&work);
            work.tensors_mut()[t][k] = orig;
            for term in 0..3 {
                out[term].push((plus[term] - minus[term]) / (2.0 * h));
            }
        }
        out
    }
}

fn locate(params: &ModelParams<f64>, mut flat: usize) -> (usize, usize) {
    for (t, tensor) in params.tensors().iter().enumerate() {
        if flat < tensor.len() {
            return (t, flat);
        }
        flat -= tensor.len();
    }
    panic!("parameter index out of range");
}

/// Relative error with a small absolute floor on the denominator.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

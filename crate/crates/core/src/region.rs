//! Seeded region growing over a proximity graph.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{dist, folded_angle_deg, Neighborhood, PointCloud, SpatialIndex};
use crate::labels::{Label, LabelMap, Provenance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowMode {
    /// Adjacent normals within `angle_threshold` degrees (sign-folded).
    NormalAngle,
    /// Adjacent RGB colors within `color_threshold`.
    ColorDistance,
    /// Pure proximity over a k-nearest-neighbor graph.
    KnnBall,
    /// Pure proximity over a fixed-radius graph.
    FdnBall,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrowConfig {
    pub mode: GrowMode,
    pub connectivity: Neighborhood,
    pub angle_threshold: f64,
    pub color_threshold: f64,
    pub max_region_fraction: f64,
}

impl Default for GrowConfig {
    fn default() -> Self {
        Self {
            mode: GrowMode::NormalAngle,
            connectivity: Neighborhood::Knn { k: 8 },
            angle_threshold: 8.0,
            color_threshold: 0.1,
            max_region_fraction: 0.05,
        }
    }
}

impl GrowConfig {
    pub fn validate(&self) -> Result<()> {
        self.connectivity.validate()?;
        if !(self.angle_threshold > 0.0) {
            return Err(Error::invalid("angle_threshold must be positive"));
        }
        if !(self.color_threshold > 0.0) {
            return Err(Error::invalid("color_threshold must be positive"));
        }
        if !(self.max_region_fraction > 0.0 && self.max_region_fraction <= 1.0) {
            return Err(Error::invalid("max_region_fraction must lie in (0, 1]"));
        }
        match (self.mode, self.connectivity) {
            (GrowMode::KnnBall, Neighborhood::Fdn { .. }) => {
                Err(Error::invalid("knn_ball growing requires knn connectivity"))
            }
            (GrowMode::FdnBall, Neighborhood::Knn { .. }) => {
                Err(Error::invalid("fdn_ball growing requires fdn connectivity"))
            }
            _ => Ok(()),
        }
    }

    /// Per-source cap on newly labeled points for a cloud of `n` points.
    pub fn region_cap(&self, n: usize) -> usize {
        (self.max_region_fraction * n as f64).ceil() as usize
    }
}

/// Propagates every `Seed` label of `seeds` to unlabeled neighbors.
///
/// Seeds are expanded breadth-first from one shared queue in ascending point order. A point
/// adopts the label of the neighbor that reached it first when the mode criterion between the
/// two holds. Existing labels are never overwritten.
pub fn grow_regions(
    cloud: &PointCloud,
    seeds: &LabelMap,
    config: &GrowConfig,
    index: &SpatialIndex,
) -> Result<LabelMap> {
    let sources: Vec<usize> = seeds
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.is_some_and(|l| l.provenance == Provenance::Seed))
        .map(|(i, _)| i)
        .collect();
    if sources.is_empty() {
        return Err(Error::invalid("region growing needs at least one seed"));
    }
    grow_from(cloud, seeds, &sources, config, index, |e| e.is_none(), Provenance::Grown)
}

/// General form of [`grow_regions`]: expands from `sources` (which must be labeled) into points
/// for which `claimable` holds, writing `provenance`.
pub fn grow_from(
    cloud: &PointCloud,
    labels: &LabelMap,
    sources: &[usize],
    config: &GrowConfig,
    index: &SpatialIndex,
    claimable: impl Fn(Option<Label>) -> bool,
    provenance: Provenance,
) -> Result<LabelMap> {
    config.validate()?;
    let n = cloud.len();
    if labels.len() != n || index.len() != n {
        return Err(Error::invalid("cloud, labels and index sizes differ"));
    }
    let criterion = Criterion::new(cloud, config)?;
    let cap = config.region_cap(n);

    let mut out = labels.clone();
    let mut open: Vec<bool> = labels.entries().iter().map(|&e| claimable(e)).collect();
    let mut grown = vec![0usize; sources.len()];
    let mut queue = VecDeque::new();
    let mut ordered: Vec<(usize, usize)> = sources.iter().copied().enumerate().map(|(s, p)| (p, s)).collect();
    ordered.sort_unstable();
    for &(p, s) in &ordered {
        if labels.get(p).is_none() {
            return Err(Error::invalid(format!("growth source {p} is unlabeled")));
        }
        open[p] = false;
        queue.push_back((p, s));
    }

    while let Some((i, s)) = queue.pop_front() {
        if grown[s] >= cap {
            continue;
        }
        let class = out.class(i).expect("queued points are labeled");
        for j in index.neighbors_of(i, config.connectivity)? {
            if grown[s] >= cap {
                break;
            }
            if !open[j] || !criterion.holds(i, j) {
                continue;
            }
            open[j] = false;
            out.set(j, class, provenance)?;
            grown[s] += 1;
            queue.push_back((j, s));
        }
    }
    Ok(out)
}

enum Criterion<'a> {
    Normals(&'a [[f32; 3]], f64),
    Colors(&'a [[f32; 3]], f64),
    Always,
}

impl<'a> Criterion<'a> {
    fn new(cloud: &'a PointCloud, config: &GrowConfig) -> Result<Self> {
        Ok(match config.mode {
            GrowMode::NormalAngle => Criterion::Normals(
                cloud
                    .normals()
                    .ok_or_else(|| Error::invalid("normal-angle growing requires normals"))?,
                config.angle_threshold,
            ),
            GrowMode::ColorDistance => Criterion::Colors(
                cloud
                    .colors()
                    .ok_or_else(|| Error::invalid("color growing requires colors"))?,
                config.color_threshold,
            ),
            GrowMode::KnnBall | GrowMode::FdnBall => Criterion::Always,
        })
    }

    fn holds(&self, i: usize, j: usize) -> bool {
        match self {
            Criterion::Normals(n, t) => folded_angle_deg(&n[i], &n[j]) <= *t,
            Criterion::Colors(c, t) => dist(&c[i], &c[j]) <= *t,
            Criterion::Always => true,
        }
    }
}

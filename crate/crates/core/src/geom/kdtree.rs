use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use super::{dist2, Point3, PointCloud};
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 16;

/// Neighborhood definition for proximity queries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Neighborhood {
    /// The `k` nearest points.
    Knn { k: usize },
    /// Every point within `radius` (inclusive).
    Fdn { radius: f32 },
}

impl Neighborhood {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Neighborhood::Knn { k } if k == 0 => Err(Error::invalid("k must be at least 1")),
            Neighborhood::Fdn { radius } if !(radius > 0.0) || !radius.is_finite() => {
                Err(Error::invalid(format!("radius must be positive and finite, got {radius}")))
            }
            _ => Ok(()),
        }
    }
}

/// Either a free position or a point of the indexed cloud (which is then excluded from results).
#[derive(Debug, Clone, Copy)]
pub enum Query {
    Point(Point3),
    Id(usize),
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f32,
        left: usize,
        right: usize,
    },
}

/// Exact kd-tree over the positions of one cloud.
///
/// Median split along the axis of largest extent, leaves of at most 16 points.
/// Results are ordered by distance, ties broken by ascending point id.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Point3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    id: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then_with(|| self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl SpatialIndex {
    pub fn build(cloud: &PointCloud) -> Self {
        Self::from_points(cloud.positions().to_vec())
    }

    pub fn from_points(points: Vec<Point3>) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        if !points.is_empty() {
            build_node(&points, &mut order, 0, &mut nodes);
        }
        Self {
            points,
            order,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    /// Ids of the neighbors of `query`, nearest first.
    pub fn query(&self, query: Query, mode: Neighborhood) -> Result<Vec<usize>> {
        mode.validate()?;
        let (center, exclude) = match query {
            Query::Point(p) => (p, None),
            Query::Id(id) => {
                let p = *self
                    .points
                    .get(id)
                    .ok_or_else(|| Error::invalid(format!("point id {id} out of range")))?;
                (p, Some(id))
            }
        };
        if self.nodes.is_empty() {
            return Ok(Vec::new());
        }
        Ok(match mode {
            Neighborhood::Knn { k } => self.knn(&center, k, exclude),
            Neighborhood::Fdn { radius } => {
                let r = radius as f64;
                self.within(&center, r * r, exclude)
            }
        })
    }

    /// Shorthand for the neighbors of an indexed point.
    pub fn neighbors_of(&self, id: usize, mode: Neighborhood) -> Result<Vec<usize>> {
        self.query(Query::Id(id), mode)
    }

    fn knn(&self, center: &Point3, k: usize, exclude: Option<usize>) -> Vec<usize> {
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        let mut stack = vec![0usize];
        // Far subtrees are pushed with their plane distance; re-checked on pop.
        let mut bounds = vec![0.0f64];
        while let Some(node) = stack.pop() {
            let bound = bounds.pop().unwrap_or(0.0);
            if heap.len() == k && bound > heap.peek().map_or(f64::INFINITY, |c| c.d2) {
                continue;
            }
            match self.nodes[node] {
                Node::Leaf { start, end } => {
                    for &id in &self.order[start..end] {
                        if Some(id) == exclude {
                            continue;
                        }
                        let cand = Candidate {
                            d2: dist2(center, &self.points[id]),
                            id,
                        };
                        if heap.len() < k {
                            heap.push(cand);
                        } else if cand < *heap.peek().expect("heap is full") {
                            heap.pop();
                            heap.push(cand);
                        }
                    }
                }
                Node::Split {
                    axis,
                    value,
                    left,
                    right,
                } => {
                    let diff = center[axis] as f64 - value as f64;
                    let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                    stack.push(far);
                    bounds.push(bound.max(diff * diff));
                    stack.push(near);
                    bounds.push(bound);
                }
            }
        }
        heap.into_sorted_vec().into_iter().map(|c| c.id).collect()
    }

    fn within(&self, center: &Point3, r2: f64, exclude: Option<usize>) -> Vec<usize> {
        let mut found = Vec::new();
        let mut stack = vec![0usize];
        while let Some(node) = stack.pop() {
            match self.nodes[node] {
                Node::Leaf { start, end } => {
                    for &id in &self.order[start..end] {
                        if Some(id) == exclude {
                            continue;
                        }
                        let d2 = dist2(center, &self.points[id]);
                        if d2 <= r2 {
                            found.push(Candidate { d2, id });
                        }
                    }
                }
                Node::Split {
                    axis,
                    value,
                    left,
                    right,
                } => {
                    let diff = center[axis] as f64 - value as f64;
                    let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                    if diff * diff <= r2 {
                        stack.push(far);
                    }
                    stack.push(near);
                }
            }
        }
        found.sort_unstable();
        found.into_iter().map(|c| c.id).collect()
    }
}

fn build_node(points: &[Point3], order: &mut [usize], offset: usize, nodes: &mut Vec<Node>) -> usize {
    let slot = nodes.len();
    if order.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: offset,
            end: offset + order.len(),
        });
        return slot;
    }
    let mut lo = [f32::INFINITY; 3];
    let mut hi = [f32::NEG_INFINITY; 3];
    for &i in order.iter() {
        for k in 0..3 {
            lo[k] = lo[k].min(points[i][k]);
            hi[k] = hi[k].max(points[i][k]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
        .unwrap_or(0);
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
    });
    let value = points[order[mid]][axis];
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let (left_ids, right_ids) = order.split_at_mut(mid);
    let left = build_node(points, left_ids, offset, nodes);
    let right = build_node(points, right_ids, offset + mid, nodes);
    nodes[slot] = Node::Split {
        axis,
        value,
        left,
        right,
    };
    slot
}

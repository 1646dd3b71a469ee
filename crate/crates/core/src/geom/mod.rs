//! Point cloud container, normalization, spatial indexing and normal estimation.

mod kdtree;
mod normals;
pub mod ply;

pub use kdtree::{Neighborhood, Query, SpatialIndex};
pub use normals::{estimate_normals, folded_angle_deg};
pub use ply::{load_ply, load_ply_file, save_ply};

use crate::error::{Error, Result};

pub type Point3 = [f32; 3];

/// Squared Euclidean distance, accumulated in 64-bit.
#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    let dz = a[2] as f64 - b[2] as f64;
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn dist(a: &Point3, b: &Point3) -> f64 {
    dist2(a, b).sqrt()
}

/// A set of 3-D points with optional per-point colors and unit normals.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    id: String,
    positions: Vec<Point3>,
    colors: Option<Vec<Point3>>,
    normals: Option<Vec<Point3>>,
}

impl PointCloud {
    pub fn new(id: impl Into<String>, positions: Vec<Point3>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        if let Some(i) = positions
            .iter()
            .position(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self {
            id: id.into(),
            positions,
            colors: None,
            normals: None,
        })
    }

    pub fn with_colors(mut self, colors: Vec<Point3>) -> Result<Self> {
        if colors.len() != self.len() {
            return Err(Error::invalid(format!(
                "{} colors for {} points",
                colors.len(),
                self.len()
            )));
        }
        if colors
            .iter()
            .flatten()
            .any(|c| !c.is_finite() || *c < 0.0 || *c > 1.0)
        {
            return Err(Error::invalid("colors must lie in [0, 1]"));
        }
        self.colors = Some(colors);
        Ok(self)
    }

    pub fn with_normals(mut self, normals: Vec<Point3>) -> Result<Self> {
        if normals.len() != self.len() {
            return Err(Error::invalid(format!(
                "{} normals for {} points",
                normals.len(),
                self.len()
            )));
        }
        for (i, n) in normals.iter().enumerate() {
            let norm = dist(n, &[0.0; 3]);
            if !(norm - 1.0).abs().le(&1e-4) {
                return Err(Error::invalid(format!("normal {i} is not unit length ({norm})")));
            }
        }
        self.normals = Some(normals);
        Ok(self)
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    /// Always false; a cloud holds at least one point.
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Point3] {
        &self.positions
    }

    pub fn colors(&self) -> Option<&[Point3]> {
        self.colors.as_deref()
    }

    pub fn normals(&self) -> Option<&[Point3]> {
        self.normals.as_deref()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0f64; 3];
        for p in &self.positions {
            for k in 0..3 {
                c[k] += p[k] as f64;
            }
        }
        let n = self.len() as f64;
        c.map(|v| v / n)
    }

    /// Returns a cloud containing the given points, in the given order.
    pub fn select(&self, ids: &[usize]) -> Result<Self> {
        let pick = |v: &[Point3]| ids.iter().map(|&i| v[i]).collect::<Vec<_>>();
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!("point id {bad} out of range")));
        }
        let mut out = Self::new(self.id.clone(), pick(&self.positions))?;
        out.colors = self.colors.as_deref().map(pick);
        out.normals = self.normals.as_deref().map(pick);
        Ok(out)
    }
}

/// Centers the cloud at the origin and scales it so the farthest point has norm 1.
///
/// A cloud whose points all coincide is only translated.
pub fn normalize_cloud(cloud: &PointCloud) -> PointCloud {
    let c = cloud.centroid();
    let centered: Vec<[f64; 3]> = cloud
        .positions
        .iter()
        .map(|p| [p[0] as f64 - c[0], p[1] as f64 - c[1], p[2] as f64 - c[2]])
        .collect();
    let max_norm = centered
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0f64, f64::max);
    let scale = if max_norm > 0.0 { 1.0 / max_norm } else { 1.0 };
    let mut out = cloud.clone();
    out.positions = centered
        .iter()
        .map(|p| p.map(|v| (v * scale) as f32))
        .collect();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &Point3, b: &Point3, tol: f32) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(PointCloud::new("e", vec![]).is_err());
        assert!(PointCloud::new("n", vec![[0.0, f32::NAN, 0.0]]).is_err());
        assert!(PointCloud::new("i", vec![[f32::INFINITY, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn normalize_two_points() {
        let cloud = PointCloud::new("t", vec![[1.0, 1.0, 1.0], [3.0, 1.0, 1.0]]).unwrap();
        let n = normalize_cloud(&cloud);
        assert!(close(&n.positions()[0], &[-1.0, 0.0, 0.0], 1e-6));
        assert!(close(&n.positions()[1], &[1.0, 0.0, 0.0], 1e-6));
    }

    #[test]
    fn normalize_single_point_goes_to_origin() {
        let cloud = PointCloud::new("s", vec![[5.0, 2.0, 7.0]]).unwrap();
        let n = normalize_cloud(&cloud);
        assert_eq!(n.positions()[0], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_is_idempotent() {
        let cloud = PointCloud::new(
            "i",
            vec![[0.3, -2.0, 1.0], [4.0, 0.5, 0.0], [-1.0, 1.0, 2.5], [0.0, 0.0, -3.0]],
        )
        .unwrap();
        let once = normalize_cloud(&cloud);
        let twice = normalize_cloud(&once);
        for (a, b) in once.positions().iter().zip(twice.positions()) {
            assert!(close(a, b, 1e-6));
        }
        let c = once.centroid();
        assert!(c.iter().all(|v| v.abs() < 1e-6));
        let max = once
            .positions()
            .iter()
            .map(|p| dist(p, &[0.0; 3]))
            .fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-6);
    }

    #[test]
    fn normals_must_be_unit() {
        let cloud = PointCloud::new("n", vec![[0.0; 3]]).unwrap();
        assert!(cloud.clone().with_normals(vec![[0.0, 0.0, 2.0]]).is_err());
        assert!(cloud.with_normals(vec![[0.0, 0.0, 1.0]]).is_ok());
    }
}

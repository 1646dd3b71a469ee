use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use super::{Neighborhood, PointCloud, SpatialIndex};
use crate::error::{Error, Result};

/// Estimates a unit normal per point from the covariance of the point and its `k` nearest
/// neighbors. Normal signs are arbitrary.
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<PointCloud> {
    if k < 3 {
        return Err(Error::invalid(format!("normal estimation needs k >= 3, got {k}")));
    }
    if cloud.len() <= k {
        return Err(Error::invalid(format!(
            "normal estimation with k = {k} needs more than {k} points, got {}",
            cloud.len()
        )));
    }
    let index = SpatialIndex::build(cloud);
    let pts = cloud.positions();
    let mut normals = Vec::with_capacity(pts.len());
    for i in 0..pts.len() {
        let mut nbrs = index.neighbors_of(i, Neighborhood::Knn { k })?;
        nbrs.push(i);
        let m = nbrs.len() as f64;
        let mut mean = Vector3::zeros();
        for &j in &nbrs {
            mean += Vector3::new(pts[j][0] as f64, pts[j][1] as f64, pts[j][2] as f64);
        }
        mean /= m;
        let mut cov = Matrix3::zeros();
        for &j in &nbrs {
            let d = Vector3::new(pts[j][0] as f64, pts[j][1] as f64, pts[j][2] as f64) - mean;
            cov += d * d.transpose();
        }
        let eig = SymmetricEigen::new(cov / m);
        let (min_idx, _) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("three eigenvalues");
        let n = eig.eigenvectors.column(min_idx).normalize();
        normals.push([n[0] as f32, n[1] as f32, n[2] as f32]);
    }
    cloud.clone().with_normals(normals)
}

/// Angle between two normals in degrees, folded to [0, 90] so that sign flips are ignored.
pub fn folded_angle_deg(a: &[f32; 3], b: &[f32; 3]) -> f64 {
    let dot: f64 = (0..3).map(|k| a[k] as f64 * b[k] as f64).sum();
    let na: f64 = (0..3).map(|k| (a[k] as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = (0..3).map(|k| (b[k] as f64).powi(2)).sum::<f64>().sqrt();
    let c = (dot.abs() / (na * nb)).min(1.0);
    c.acos().to_degrees()
}

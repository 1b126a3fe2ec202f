//! Voxel downsampling and PCA normal estimation.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::spatial_index::{grid_index, CellIndex, SearchGrid};

/// Minimum neighborhood size (including the point itself) for a plane fit.
pub const MIN_NORMAL_NEIGHBORS: usize = 3;

/// One point per occupied voxel: the centroid of its members, with the
/// renormalized mean normal when the input has normals. The voxel lattice is
/// centered on the multiple of `leaf` nearest the cloud centroid, which sits
/// mid-voxel, so repeated passes share one lattice. Voxels are emitted in
/// order of first occurrence.
pub fn voxel_downsample(cloud: &PointCloud, leaf: f64) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if !(leaf > 0.0) {
        return Err(Error::InvalidArgument("leaf must be > 0".into()));
    }
    let snapped = cloud.centroid().expect("non-empty").map(|c| (c / leaf).round() * leaf);
    let center = snapped - Vector3::repeat(leaf / 2.0);
    let mut slot: FxHashMap<CellIndex, usize> = FxHashMap::default();
    let mut sums: Vec<(Vector3<f64>, Vector3<f64>, usize)> = Vec::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        let k = grid_index(p, &center, leaf);
        let s = *slot.entry(k).or_insert_with(|| {
            sums.push((Vector3::zeros(), Vector3::zeros(), 0));
            sums.len() - 1
        });
        let acc = &mut sums[s];
        acc.0 += p;
        if let Some(ns) = &cloud.normals {
            acc.1 += ns[i];
        }
        acc.2 += 1;
    }
    let positions = sums.iter().map(|(p, _, n)| p / *n as f64).collect();
    let normals = cloud.normals.as_ref().map(|_| {
        sums.iter()
            .map(|(_, n, _)| {
                let len = n.norm();
                if len > 1e-12 {
                    n / len
                } else {
                    Vector3::zeros()
                }
            })
            .collect()
    });
    Ok(PointCloud { positions, normals })
}

/// PCA normals over the `radius` neighborhood, oriented toward `viewpoint`.
///
/// Points with fewer than [`MIN_NORMAL_NEIGHBORS`] neighbors (themselves
/// included) receive the zero marker normal.
pub fn estimate_normals(cloud: &PointCloud, radius: f64, viewpoint: &Point) -> Result<PointCloud> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument("radius must be > 0".into()));
    }
    if cloud.is_empty() {
        return Ok(PointCloud::with_normals(Vec::new(), Vec::new())?);
    }
    let grid = SearchGrid::new(&cloud.positions, radius)?;
    let normals = estimate_normals_with_grid(&cloud.positions, &grid, radius, viewpoint);
    PointCloud::with_normals(cloud.positions.clone(), normals)
}

pub(crate) fn estimate_normals_with_grid(
    positions: &[Point],
    grid: &SearchGrid,
    radius: f64,
    viewpoint: &Point,
) -> Vec<Vector3<f64>> {
    positions
        .par_iter()
        .map(|p| {
            let mut count = 0usize;
            let mut sum = Vector3::zeros();
            let pts = grid.points();
            grid.radius_search_with(p, radius, |i, _| {
                count += 1;
                sum += pts[i];
            });
            if count < MIN_NORMAL_NEIGHBORS {
                return Vector3::zeros();
            }
            let mean = sum / count as f64;
            let mut cov = Matrix3::zeros();
            grid.radius_search_with(p, radius, |i, _| {
                let d = pts[i] - mean;
                cov += d * d.transpose();
            });
            plane_normal(&cov, p, viewpoint)
        })
        .collect()
}

fn plane_normal(cov: &Matrix3<f64>, p: &Point, viewpoint: &Point) -> Vector3<f64> {
    let eig = SymmetricEigen::new(*cov);
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
        .expect("three eigenvalues");
    let mut n: Vector3<f64> = eig.eigenvectors.column(imin).into_owned();
    let len = n.norm();
    if !(len > 0.0) || !len.is_finite() {
        return Vector3::zeros();
    }
    n /= len;
    if n.dot(&(viewpoint - p)) < 0.0 {
        n = -n;
    }
    n
}

//! Fast Point Feature Histograms.
//!
//! Each point gets three 11-bin histograms of the Darboux-frame pair angles
//! `(theta, alpha, phi)` against its radius neighbors (the SPFH, each
//! sub-histogram normalized to sum to 100), and the final descriptor adds the
//! distance-weighted mean of the neighbors' SPFHs:
//! `FPFH(p) = SPFH(p) + (1/k) * sum_i SPFH(p_i) / w_i`, `w_i = |p - p_i|`.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::spatial_index::SearchGrid;

pub const BINS_PER_FEATURE: usize = 11;
pub const FPFH_DIM: usize = 3 * BINS_PER_FEATURE;

pub type Histogram = [f64; FPFH_DIM];

/// 33-bin FPFH descriptor. All-zero marks a degenerate point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpfhFeature {
    pub histogram: Histogram,
}

impl FpfhFeature {
    pub const ZERO: FpfhFeature = FpfhFeature {
        histogram: [0.0; FPFH_DIM],
    };

    pub fn is_zero(&self) -> bool {
        self.histogram.iter().all(|&v| v == 0.0)
    }
}

/// The three angular pair features `(theta, alpha, phi)` of `(p1, n1)` and
/// `(p2, n2)`, or `None` for coincident points or a degenerate frame.
pub fn pair_features(p1: &Point, n1: &Vector3<f64>, p2: &Point, n2: &Vector3<f64>) -> Option<(f64, f64, f64)> {
    let mut dp = p2 - p1;
    let dist = dp.norm();
    if dist == 0.0 {
        return None;
    }
    let mut ns = n1;
    let mut nt = n2;
    let angle1 = n1.dot(&dp) / dist;
    let angle2 = n2.dot(&dp) / dist;
    let phi;
    // Source is the point whose normal makes the smaller angle with the line.
    if angle1.abs().acos() > angle2.abs().acos() {
        ns = n2;
        nt = n1;
        dp = -dp;
        phi = -angle2;
    } else {
        phi = angle1;
    }
    let v = dp.cross(ns);
    let v_norm = v.norm();
    if v_norm == 0.0 {
        return None;
    }
    let v = v / v_norm;
    let w = ns.cross(&v);
    let alpha = v.dot(nt);
    let theta = w.dot(nt).atan2(ns.dot(nt));
    Some((theta, alpha, phi))
}

#[inline]
fn bin(value: f64, lo: f64, hi: f64) -> usize {
    let b = ((value - lo) / (hi - lo) * BINS_PER_FEATURE as f64).floor();
    (b.max(0.0) as usize).min(BINS_PER_FEATURE - 1)
}

/// FPFH for every point of `cloud` over a `radius` neighborhood.
///
/// Points with a marker normal or no valid neighbor get [`FpfhFeature::ZERO`];
/// the output stays index-aligned with the cloud.
pub fn compute_fpfh(cloud: &PointCloud, radius: f64) -> Result<Vec<FpfhFeature>> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument("radius must be > 0".into()));
    }
    if cloud.normals.is_none() {
        return Err(Error::MissingNormals);
    }
    if cloud.is_empty() {
        return Ok(Vec::new());
    }
    let grid = SearchGrid::new(&cloud.positions, radius)?;
    Ok(compute_fpfh_with_grid(cloud, &grid, radius))
}

/// The per-point SPFH histograms alone (each sub-histogram sums to 100 for
/// points with at least one valid pair, all-zero otherwise).
pub fn compute_spfh(cloud: &PointCloud, radius: f64) -> Result<Vec<Histogram>> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument("radius must be > 0".into()));
    }
    if cloud.normals.is_none() {
        return Err(Error::MissingNormals);
    }
    if cloud.is_empty() {
        return Ok(Vec::new());
    }
    let grid = SearchGrid::new(&cloud.positions, radius)?;
    let neighbors = neighborhoods(cloud, &grid, radius);
    Ok(spfh(cloud, &neighbors))
}

pub(crate) fn compute_fpfh_with_grid(cloud: &PointCloud, grid: &SearchGrid, radius: f64) -> Vec<FpfhFeature> {
    let neighbors = neighborhoods(cloud, grid, radius);
    let spfh = spfh(cloud, &neighbors);
    (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let nb = &neighbors[i];
            if nb.is_empty() {
                return FpfhFeature::ZERO;
            }
            let mut h = spfh[i];
            let inv_k = 1.0 / nb.len() as f64;
            for &(j, dist) in nb {
                let w = inv_k / dist;
                for (dst, src) in h.iter_mut().zip(spfh[j as usize].iter()) {
                    *dst += w * src;
                }
            }
            FpfhFeature { histogram: h }
        })
        .collect()
}

/// Neighbor lists `(index, distance)` sorted by index, excluding the point
/// itself, coincident points and points with a marker normal. Points with a
/// marker normal get an empty list.
fn neighborhoods(cloud: &PointCloud, grid: &SearchGrid, radius: f64) -> Vec<Vec<(u32, f64)>> {
    let valid: Vec<bool> = (0..cloud.len()).map(|i| cloud.has_valid_normal(i)).collect();
    cloud
        .positions
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            if !valid[i] {
                return Vec::new();
            }
            let mut out = Vec::new();
            grid.radius_search_with(p, radius, |j, d2| {
                if j != i && valid[j] && d2 > 0.0 {
                    out.push((j as u32, d2.sqrt()));
                }
            });
            out.sort_unstable_by_key(|&(j, _)| j);
            out
        })
        .collect()
}

fn spfh(cloud: &PointCloud, neighbors: &[Vec<(u32, f64)>]) -> Vec<Histogram> {
    let positions = &cloud.positions;
    let normals = cloud.normals.as_ref().expect("checked by caller");
    (0..positions.len())
        .into_par_iter()
        .map(|i| {
            let mut h = [0.0; FPFH_DIM];
            let mut count = 0usize;
            for &(j, _) in &neighbors[i] {
                let j = j as usize;
                if let Some((theta, alpha, phi)) = pair_features(&positions[i], &normals[i], &positions[j], &normals[j]) {
                    h[bin(theta, -PI, PI)] += 1.0;
                    h[BINS_PER_FEATURE + bin(alpha, -1.0, 1.0)] += 1.0;
                    h[2 * BINS_PER_FEATURE + bin(phi, -1.0, 1.0)] += 1.0;
                    count += 1;
                }
            }
            if count > 0 {
                let scale = 100.0 / count as f64;
                h.iter_mut().for_each(|v| *v *= scale);
            }
            h
        })
        .collect()
}

//! Trajectory, surface and registration metrics.

use nalgebra::Vector3;
use rayon::prelude::*;
use rustc_hash::FxHashMap;

use super::reglog::RegistrationLog;
use super::trajectory::TrajectoryFile;
use crate::error::{Error, Result};
use crate::geometry::{kabsch, Point, PointCloud, RigidTransform};
use crate::spatial_index::SearchGrid;

/// Maximum timestamp difference for associating two trajectory records (s).
pub const ASSOCIATION_TOLERANCE: f64 = 0.02;

/// Pairs each estimate record with the truth record nearest in time, when
/// within [`ASSOCIATION_TOLERANCE`]. Returns `(estimate, truth)` positions.
pub fn associate(estimate: &TrajectoryFile, truth: &TrajectoryFile) -> Vec<(Point, Point)> {
    let ts = truth.timestamps();
    estimate
        .records
        .iter()
        .filter_map(|r| {
            let k = ts.partition_point(|&t| t < r.timestamp);
            let best = [k.checked_sub(1), Some(k)]
                .into_iter()
                .flatten()
                .filter(|&i| i < ts.len())
                .min_by(|&a, &b| (ts[a] - r.timestamp).abs().total_cmp(&(ts[b] - r.timestamp).abs()))?;
            ((ts[best] - r.timestamp).abs() <= ASSOCIATION_TOLERANCE).then(|| (r.translation, truth.records[best].translation))
        })
        .collect()
}

/// Rigid least-squares alignment of `src` onto `dst`. Falls back to a pure
/// translation for collinear point sets.
pub fn align_rigid(src: &[Point], dst: &[Point]) -> Result<RigidTransform> {
    match kabsch(src, dst) {
        Ok(t) => Ok(t),
        Err(Error::DegenerateConfiguration) => {
            let n = src.len() as f64;
            let cs = src.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
            let cd = dst.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
            Ok(RigidTransform::from_translation(cd - cs))
        }
        Err(e) => Err(e),
    }
}

/// Translation RMSE of paired positions, optionally after rigid alignment.
pub fn ate_rmse_pairs(pairs: &[(Point, Point)], align: bool) -> Result<f64> {
    if pairs.len() < 3 {
        return Err(Error::TooFewAssociations {
            needed: 3,
            got: pairs.len(),
        });
    }
    let (src, dst): (Vec<Point>, Vec<Point>) = pairs.iter().copied().unzip();
    let t = if align {
        align_rigid(&src, &dst)?
    } else {
        RigidTransform::identity()
    };
    let sum: f64 = src.iter().zip(&dst).map(|(s, d)| (t.apply(s) - d).norm_squared()).sum();
    Ok((sum / pairs.len() as f64).sqrt())
}

/// Absolute trajectory error (translation RMSE in meters).
pub fn eval_ate_rmse(estimate: &TrajectoryFile, truth: &TrajectoryFile, align: bool) -> Result<f64> {
    ate_rmse_pairs(&associate(estimate, truth), align)
}

/// Mean and median distance from each reconstructed point to its nearest
/// ground-truth point.
pub fn eval_surface(recon: &PointCloud, truth: &PointCloud) -> Result<(f64, f64)> {
    if recon.is_empty() || truth.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let grid = SearchGrid::new(&truth.positions, 0.05)?;
    let mut d: Vec<f64> = recon.positions.par_iter().map(|p| grid.nearest(p).1).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let median = if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) };
    Ok((mean, median))
}

/// Threshold on probe-point RMSE for a registration to count as correct (m).
pub const REGISTRATION_RMSE_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistrationScore {
    pub recall: f64,
    pub precision: f64,
    pub correct: usize,
}

/// Probe points used to compare two transforms: a 3x3x3 lattice over
/// `[-1, 1]^3` m.
pub fn default_probes() -> Vec<Point> {
    let mut v = Vec::with_capacity(27);
    for a in [-1.0, 0.0, 1.0] {
        for b in [-1.0, 0.0, 1.0] {
            for c in [-1.0, 0.0, 1.0] {
                v.push(Vector3::new(a, b, c));
            }
        }
    }
    v
}

/// RMSE between the images of `probes` under two transforms.
pub fn transform_rmse(a: &RigidTransform, b: &RigidTransform, probes: &[Point]) -> f64 {
    let s: f64 = probes.iter().map(|p| (a.apply(p) - b.apply(p)).norm_squared()).sum();
    (s / probes.len().max(1) as f64).sqrt()
}

/// Recall and precision of `results` against `truth`. `probes(i, j)` gives
/// the points (in fragment `j` coordinates) on which transforms are compared.
pub fn eval_registration(
    results: &RegistrationLog,
    truth: &RegistrationLog,
    probes: &dyn Fn(usize, usize) -> Vec<Point>,
) -> RegistrationScore {
    let gt: FxHashMap<(usize, usize), RigidTransform> = truth.entries.iter().map(|e| ((e.i, e.j), e.transform)).collect();
    let correct = results
        .entries
        .iter()
        .filter(|e| {
            gt.get(&(e.i, e.j))
                .is_some_and(|t| transform_rmse(&e.transform, t, &probes(e.i, e.j)) < REGISTRATION_RMSE_THRESHOLD)
        })
        .count();
    let ratio = |n: usize| if n == 0 { 0.0 } else { correct as f64 / n as f64 };
    RegistrationScore {
        recall: ratio(truth.entries.len()),
        precision: ratio(results.entries.len()),
        correct,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::reglog::LogEntry;

    fn traj(offset: Vector3<f64>) -> TrajectoryFile {
        let ts: Vec<f64> = (0..30).map(|k| k as f64 * 0.1).collect();
        let poses: Vec<_> = (0..30)
            .map(|k| {
                let a = k as f64 * 0.2;
                RigidTransform::from_translation(Vector3::new(a.cos(), a.sin(), 0.1 * a) + offset)
            })
            .collect();
        TrajectoryFile::from_poses(&ts, &poses).unwrap()
    }

    #[test]
    fn ate_examples() {
        let t = traj(Vector3::zeros());
        assert_eq!(eval_ate_rmse(&t, &t, false).unwrap(), 0.0);
        let shifted = traj(Vector3::new(0.1, 0.0, 0.0));
        assert!((eval_ate_rmse(&t, &shifted, false).unwrap() - 0.1).abs() < 1e-12);
        assert!(eval_ate_rmse(&t, &shifted, true).unwrap() < 1e-9);
        let short = TrajectoryFile {
            records: t.records[..2].to_vec(),
        };
        assert!(matches!(eval_ate_rmse(&short, &t, false), Err(Error::TooFewAssociations { .. })));
    }

    #[test]
    fn surface_examples() {
        let mut plane = Vec::new();
        for a in 0..200 {
            for b in 0..200 {
                plane.push(Vector3::new(a as f64 * 0.005, b as f64 * 0.005, 0.0));
            }
        }
        let truth = PointCloud::new(plane.clone());
        assert_eq!(eval_surface(&truth, &truth).unwrap(), (0.0, 0.0));

        let lifted = PointCloud::new(plane.iter().map(|p| p + Vector3::new(0.0, 0.0, 0.01)).collect());
        let (mean, median) = eval_surface(&lifted, &truth).unwrap();
        assert!((mean - 0.01).abs() < 1e-9 && (median - 0.01).abs() < 1e-9);

        let mut pts: Vec<_> = plane[..999].to_vec();
        pts.push(Vector3::new(0.5, 0.5, 1.0));
        let (mean, median) = eval_surface(&PointCloud::new(pts), &truth).unwrap();
        assert_eq!(median, 0.0);
        assert!((mean - 0.001).abs() < 1e-12);
    }

    fn entry(i: usize, j: usize, x: f64) -> LogEntry {
        LogEntry {
            i,
            j,
            n: 20,
            transform: RigidTransform::from_translation(Vector3::new(x, 0.0, 0.0)),
        }
    }

    #[test]
    fn registration_examples() {
        let truth = RegistrationLog {
            entries: (0..10).map(|k| entry(k, k + 5, 1.0)).collect(),
        };
        let probes = |_: usize, _: usize| default_probes();
        let s = eval_registration(&truth, &truth, &probes);
        assert_eq!((s.recall, s.precision), (1.0, 1.0));

        let s = eval_registration(&RegistrationLog::default(), &truth, &probes);
        assert_eq!((s.recall, s.precision), (0.0, 0.0));

        // 5 exact, 1 far off.
        let mut res: Vec<_> = (0..5).map(|k| entry(k, k + 5, 1.0)).collect();
        res.push(entry(7, 12, 3.0));
        let s = eval_registration(&RegistrationLog { entries: res }, &truth, &probes);
        assert_eq!(s.correct, 5);
        assert_eq!(s.recall, 0.5);
        assert!((s.precision - 5.0 / 6.0).abs() < 1e-12);
    }
}

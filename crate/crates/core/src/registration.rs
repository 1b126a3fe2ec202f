//! Data-parallel RANSAC global registration over FPFH correspondences.
//!
//! Pipeline: downsample, estimate normals, compute FPFH, pre-match every
//! source descriptor to its nearest target descriptor, draw random source
//! quadruples, reject quadruples whose edge lengths disagree, then score the
//! surviving hypotheses by inlier ratio and fitness and keep the best one.
//!
//! Hypothesis `i` draws its quadruple from a ChaCha stream keyed by
//! `(seed, i)`, so results do not depend on evaluation order or thread count.

use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{compute_fpfh_with_grid, FpfhFeature};
use crate::geometry::{kabsch_from_covariance, Point, PointCloud, RigidTransform};
use crate::preprocess::{estimate_normals_with_grid, voxel_downsample};
use crate::spatial_index::{feature_nn_cache, SearchGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationParams {
    /// Voxel leaf size (m).
    pub leaf: f64,
    /// Normal estimation radius (m).
    pub normal_radius: f64,
    /// FPFH radius (m).
    pub feature_radius: f64,
    pub hypothesis_count: usize,
    /// Edge-length similarity threshold for pre-rejection, in (0, 1).
    pub similarity_tau: f64,
    /// Maximum correspondence distance (m).
    pub d_max: f64,
    pub min_inlier_ratio: f64,
    /// Maximum accepted mean squared inlier distance (m^2).
    pub max_fitness: f64,
    /// Maximum angle between matched normals (rad).
    pub normal_angle_max: f64,
    pub seed: u64,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        let d_max = 0.075;
        Self {
            leaf: 0.05,
            normal_radius: 0.1,
            feature_radius: 0.25,
            hypothesis_count: 4_000_000,
            similarity_tau: 0.9,
            d_max,
            min_inlier_ratio: 0.25,
            max_fitness: d_max * d_max / 2.0,
            normal_angle_max: 30f64.to_radians(),
            seed: 0,
        }
    }
}

impl RegistrationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.similarity_tau > 0.0 && self.similarity_tau < 1.0) {
            return Err(Error::InvalidArgument("similarity_tau must be in (0, 1)".into()));
        }
        if self.hypothesis_count == 0 {
            return Err(Error::InvalidArgument("hypothesis_count must be >= 1".into()));
        }
        if !(self.d_max > 0.0 && self.leaf > 0.0 && self.normal_radius > 0.0 && self.feature_radius > 0.0) {
            return Err(Error::InvalidArgument("radii and d_max must be > 0".into()));
        }
        Ok(())
    }
}

/// Winning hypothesis. `transform` maps source (P) coordinates into target (Q) coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    pub inlier_ratio: f64,
    pub fitness: f64,
    pub hypothesis_index: usize,
}

/// Inlier statistics of one hypothesis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HypothesisScore {
    pub inliers: usize,
    pub inlier_ratio: f64,
    pub fitness: f64,
}

/// A quadruple pair that survived pre-rejection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hypothesis {
    pub index: usize,
    pub p: [u32; 4],
    pub q: [u32; 4],
}

/// Counter-based generator for hypothesis `index`.
pub fn hypothesis_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Four distinct source indices drawn uniformly from `0..cloud_len`, paired
/// with their pre-matched target indices from `cache`.
pub fn sample_quadruple(cloud_len: usize, cache: &[usize], rng: &mut impl Rng) -> Result<([usize; 4], [usize; 4])> {
    if cloud_len < 4 {
        return Err(Error::TooFewPoints {
            needed: 4,
            got: cloud_len,
        });
    }
    let mut p = [0usize; 4];
    let mut k = 0;
    while k < 4 {
        let c = rng.random_range(0..cloud_len);
        if !p[..k].contains(&c) {
            p[k] = c;
            k += 1;
        }
    }
    Ok((p, p.map(|i| cache[i])))
}

/// True when the quadruples cannot form similar polygons: for some cyclic
/// edge `k -> k+1`, one side is shorter than `tau` times the other.
pub fn prereject(p: &[Point; 4], q: &[Point; 4], tau: f64) -> bool {
    (0..4).any(|k| {
        let n = (k + 1) % 4;
        let dp = (p[k] - p[n]).norm();
        let dq = (q[k] - q[n]).norm();
        dp < tau * dq || dq < tau * dp
    })
}

/// Scores `t` against the target: a source point is an inlier when its
/// nearest target point lies within `d_max` and their normals agree within
/// `normal_angle_max`.
pub fn evaluate_hypothesis(
    t: &RigidTransform,
    p: &PointCloud,
    q: &PointCloud,
    q_grid: &SearchGrid,
    params: &RegistrationParams,
) -> HypothesisScore {
    score(t, p, q, q_grid, params, usize::MAX).expect("unbounded scoring always completes")
}

/// Scoring that gives up once more than `max_outliers` points failed.
fn score(
    t: &RigidTransform,
    p: &PointCloud,
    q: &PointCloud,
    q_grid: &SearchGrid,
    params: &RegistrationParams,
    max_outliers: usize,
) -> Option<HypothesisScore> {
    let cos_max = params.normal_angle_max.cos();
    let p_normals = p.normals.as_deref();
    let q_normals = q.normals.as_deref();
    let mut inliers = 0usize;
    let mut outliers = 0usize;
    let mut sq_sum = 0.0;
    for (i, x) in p.positions.iter().enumerate() {
        let y = t.apply(x);
        let hit = q_grid.nn_within_squared(&y, params.d_max).and_then(|(j, d2)| {
            let normal_ok = match (p_normals, q_normals) {
                (Some(pn), Some(qn)) => {
                    let a = pn[i];
                    let b = qn[j];
                    a.norm_squared() > 0.5 && b.norm_squared() > 0.5 && (t.rotation * a).dot(&b) >= cos_max
                }
                _ => true,
            };
            normal_ok.then_some(d2)
        });
        match hit {
            Some(d2) => {
                inliers += 1;
                sq_sum += d2;
            }
            None => {
                outliers += 1;
                if outliers > max_outliers {
                    return None;
                }
            }
        }
    }
    let n = p.len().max(1) as f64;
    Some(HypothesisScore {
        inliers,
        inlier_ratio: inliers as f64 / n,
        fitness: if inliers > 0 { sq_sum / inliers as f64 } else { 0.0 },
    })
}

/// Preprocessed source/target pair, ready for hypothesis generation.
#[derive(Debug, Clone)]
pub struct RegistrationContext {
    pub params: RegistrationParams,
    /// Downsampled source with normals.
    pub source: PointCloud,
    /// Downsampled target with normals.
    pub target: PointCloud,
    pub source_features: Vec<FpfhFeature>,
    pub target_features: Vec<FpfhFeature>,
    /// For each source point, the target point with the nearest descriptor.
    pub feature_cache: Vec<usize>,
    target_grid: SearchGrid,
}

impl RegistrationContext {
    /// Downsample, normals (viewpoint at each cloud's origin), FPFH and
    /// feature pre-matching.
    pub fn prepare(p: &PointCloud, q: &PointCloud, params: &RegistrationParams) -> Result<Self> {
        params.validate()?;
        if p.is_empty() || q.is_empty() {
            return Err(Error::MissingData("registration needs two non-empty clouds".into()));
        }
        let (source, source_features) = Self::prepare_cloud(p, params)?;
        let (target, target_features) = Self::prepare_cloud(q, params)?;
        if source.len() < 4 {
            return Err(Error::TooFewPoints {
                needed: 4,
                got: source.len(),
            });
        }
        if target.len() < 3 {
            return Err(Error::TooFewPoints {
                needed: 3,
                got: target.len(),
            });
        }
        let fp: Vec<_> = source_features.iter().map(|f| f.histogram).collect();
        let fq: Vec<_> = target_features.iter().map(|f| f.histogram).collect();
        let feature_cache = feature_nn_cache(&fp, &fq)?;
        // One-cell reach: every candidate within d_max sits in the 27 cells
        // around the query cell.
        let target_grid = SearchGrid::new(&target.positions, params.d_max)?;
        Ok(Self {
            params: params.clone(),
            source,
            target,
            source_features,
            target_features,
            feature_cache,
            target_grid,
        })
    }

    fn prepare_cloud(c: &PointCloud, params: &RegistrationParams) -> Result<(PointCloud, Vec<FpfhFeature>)> {
        let down = voxel_downsample(c, params.leaf)?;
        let normal_grid = SearchGrid::new(&down.positions, params.normal_radius)?;
        let normals = estimate_normals_with_grid(&down.positions, &normal_grid, params.normal_radius, &Vector3::zeros());
        let cloud = PointCloud::with_normals(down.positions, normals)?;
        let feature_grid = SearchGrid::new(&cloud.positions, params.feature_radius)?;
        let features = compute_fpfh_with_grid(&cloud, &feature_grid, params.feature_radius);
        Ok((cloud, features))
    }

    pub fn target_grid(&self) -> &SearchGrid {
        &self.target_grid
    }

    /// Samples hypotheses `range` and keeps those passing pre-rejection, in index order.
    pub fn sample_and_prereject(&self, range: std::ops::Range<usize>) -> Vec<Hypothesis> {
        let n = self.source.len();
        let tau = self.params.similarity_tau;
        range
            .into_par_iter()
            .filter_map(|i| {
                let mut rng = hypothesis_rng(self.params.seed, i);
                let (pi, qi) = sample_quadruple(n, &self.feature_cache, &mut rng).ok()?;
                let pp = pi.map(|k| self.source.positions[k]);
                let qq = qi.map(|k| self.target.positions[k]);
                (!prereject(&pp, &qq, tau)).then(|| Hypothesis {
                    index: i,
                    p: pi.map(|k| k as u32),
                    q: qi.map(|k| k as u32),
                })
            })
            .collect()
    }

    /// Rigid transform of one hypothesis quadruple, `None` if degenerate.
    pub fn hypothesis_transform(&self, h: &Hypothesis) -> Option<RigidTransform> {
        let src = h.p.map(|k| self.source.positions[k as usize]);
        let dst = h.q.map(|k| self.target.positions[k as usize]);
        let cs = src.iter().fold(Vector3::zeros(), |a, p| a + p) / 4.0;
        let cd = dst.iter().fold(Vector3::zeros(), |a, p| a + p) / 4.0;
        let mut cov = Matrix3::zeros();
        for (s, d) in src.iter().zip(&dst) {
            cov += (s - cs) * (d - cd).transpose();
        }
        kabsch_from_covariance(&cov, &cs, &cd).ok()
    }

    /// Full score of a transform against the prepared target.
    pub fn evaluate(&self, t: &RigidTransform) -> HypothesisScore {
        evaluate_hypothesis(t, &self.source, &self.target, &self.target_grid, &self.params)
    }

    /// Scores hypotheses in parallel. Hypotheses that provably cannot reach
    /// `min_inlier_ratio` are abandoned early and omitted.
    pub fn evaluate_hypotheses(&self, hypotheses: &[Hypothesis]) -> Vec<(usize, RigidTransform, HypothesisScore)> {
        let n = self.source.len();
        let min_inliers = (self.params.min_inlier_ratio * n as f64).ceil() as usize;
        let max_outliers = n.saturating_sub(min_inliers);
        hypotheses
            .par_iter()
            .filter_map(|h| {
                let t = self.hypothesis_transform(h)?;
                let s = score(&t, &self.source, &self.target, &self.target_grid, &self.params, max_outliers)?;
                Some((h.index, t, s))
            })
            .collect()
    }

    /// Best qualifying hypothesis: most inliers, then lowest fitness, then
    /// lowest index. Associative and commutative, so any reduction order agrees.
    pub fn select(&self, scored: &[(usize, RigidTransform, HypothesisScore)]) -> Option<RegistrationResult> {
        scored
            .par_iter()
            .filter(|(_, _, s)| s.inlier_ratio >= self.params.min_inlier_ratio && s.fitness <= self.params.max_fitness && s.inliers > 0)
            .map(|&(index, t, s)| RegistrationResult {
                transform: t,
                inlier_ratio: s.inlier_ratio,
                fitness: s.fitness,
                hypothesis_index: index,
            })
            .reduce_with(better)
    }

    /// Same winner as `select(&evaluate_hypotheses(hypotheses))`, but a
    /// hypothesis is abandoned as soon as it cannot tie the inlier count of
    /// the best qualifying hypothesis seen so far. Pruned hypotheses have
    /// strictly fewer inliers than some qualifying one, so the schedule
    /// changes how much work is skipped and never the result.
    pub fn best_of(&self, hypotheses: &[Hypothesis]) -> Option<RegistrationResult> {
        let n = self.source.len();
        let min_inliers = ((self.params.min_inlier_ratio * n as f64).ceil() as usize).max(1);
        let best = AtomicUsize::new(min_inliers);
        hypotheses
            .par_iter()
            .filter_map(|h| {
                let t = self.hypothesis_transform(h)?;
                let max_outliers = n.saturating_sub(best.load(AtomicOrdering::Relaxed));
                let s = score(&t, &self.source, &self.target, &self.target_grid, &self.params, max_outliers)?;
                let qualifies = s.inlier_ratio >= self.params.min_inlier_ratio && s.fitness <= self.params.max_fitness && s.inliers > 0;
                if !qualifies {
                    return None;
                }
                best.fetch_max(s.inliers, AtomicOrdering::Relaxed);
                Some(RegistrationResult {
                    transform: t,
                    inlier_ratio: s.inlier_ratio,
                    fitness: s.fitness,
                    hypothesis_index: h.index,
                })
            })
            .reduce_with(better)
    }

    /// Runs hypotheses `0..hypothesis_count` end to end.
    pub fn run(&self) -> Option<RegistrationResult> {
        let survivors = self.sample_and_prereject(0..self.params.hypothesis_count);
        self.best_of(&survivors)
    }
}

fn better(a: RegistrationResult, b: RegistrationResult) -> RegistrationResult {
    use std::cmp::Ordering;
    let ord = b
        .inlier_ratio
        .partial_cmp(&a.inlier_ratio)
        .unwrap_or(Ordering::Equal)
        .then(a.fitness.partial_cmp(&b.fitness).unwrap_or(Ordering::Equal))
        .then(a.hypothesis_index.cmp(&b.hypothesis_index));
    if ord == Ordering::Greater {
        b
    } else {
        a
    }
}

/// Aligns `p` onto `q`; `None` when no hypothesis passes the thresholds.
pub fn register_global(p: &PointCloud, q: &PointCloud, params: &RegistrationParams) -> Result<Option<RegistrationResult>> {
    let ctx = RegistrationContext::prepare(p, q, params)?;
    Ok(ctx.run())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(side: f64) -> [Point; 4] {
        [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(side, 0.0, 0.0),
            Vector3::new(side, side, 0.0),
            Vector3::new(0.0, side, 0.0),
        ]
    }

    #[test]
    fn prereject_examples() {
        let p = square(1.0);
        let moved = RigidTransform::from_axis_angle(&Vector3::new(1.0, 1.0, 0.0), 0.8, Vector3::new(3.0, 0.0, 1.0));
        let q = p.map(|x| moved.apply(&x));
        assert!(!prereject(&p, &q, 0.9));

        let mut q_short = p;
        q_short[1] = Vector3::new(0.5, 0.0, 0.0);
        assert!(prereject(&p, &q_short, 0.9));

        assert!(!prereject(&p, &square(0.95), 0.9));
    }

    #[test]
    fn sample_examples() {
        let cache = vec![3, 2, 1, 0];
        let mut rng = hypothesis_rng(1, 0);
        let (p, q) = sample_quadruple(4, &cache, &mut rng).unwrap();
        let mut sorted = p;
        sorted.sort();
        assert_eq!(sorted, [0, 1, 2, 3]);
        assert_eq!(q, p.map(|i| cache[i]));
        assert!(matches!(sample_quadruple(3, &cache, &mut rng), Err(Error::TooFewPoints { .. })));

        let a = sample_quadruple(50, &[0; 50], &mut hypothesis_rng(7, 12)).unwrap();
        let b = sample_quadruple(50, &[0; 50], &mut hypothesis_rng(7, 12)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_is_uniform() {
        let n = 100;
        let cache: Vec<usize> = (0..n).collect();
        let mut counts = vec![0usize; n];
        let samples = 100_000;
        for i in 0..samples {
            let (p, _) = sample_quadruple(n, &cache, &mut hypothesis_rng(42, i)).unwrap();
            for k in p {
                counts[k] += 1;
            }
        }
        // Each index appears in a sample with probability 4/n.
        let pr = 4.0 / n as f64;
        let mean = samples as f64 * pr;
        let sigma = (samples as f64 * pr * (1.0 - pr)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() < 5.0 * sigma, "count {c} vs mean {mean}");
        }
    }

    fn grid_plane(n: usize, spacing: f64, offset: Vector3<f64>) -> Vec<Point> {
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                pts.push(offset + Vector3::new(i as f64 * spacing, j as f64 * spacing, 0.0));
            }
        }
        pts
    }

    #[test]
    fn evaluate_examples() {
        let pts = grid_plane(10, 0.05, Vector3::zeros());
        let normals = vec![Vector3::z(); pts.len()];
        let cloud = PointCloud::with_normals(pts.clone(), normals.clone()).unwrap();
        let grid = SearchGrid::new(&pts, 0.075).unwrap();
        let params = RegistrationParams::default();

        let s = evaluate_hypothesis(&RigidTransform::identity(), &cloud, &cloud, &grid, &params);
        assert_eq!(s.inlier_ratio, 1.0);
        assert!(s.fitness.abs() < 1e-12);

        let shift = RigidTransform::from_translation(Vector3::new(0.0, 0.0, 0.2));
        let s = evaluate_hypothesis(&shift, &cloud, &cloud, &grid, &params);
        assert_eq!(s.inlier_ratio, 0.0);
        assert_eq!(s.fitness, 0.0);

        // Half of P coincides with Q, the other half sits 1 m away.
        let mut split = pts.clone();
        split.extend(grid_plane(10, 0.05, Vector3::new(0.0, 0.0, 1.0)));
        let p = PointCloud::with_normals(split.clone(), vec![Vector3::z(); split.len()]).unwrap();
        let s = evaluate_hypothesis(&RigidTransform::identity(), &p, &cloud, &grid, &params);
        assert_eq!(s.inlier_ratio, 0.5);
        assert_eq!(s.fitness, 0.0);
    }

    #[test]
    fn normal_check_rejects_flipped_normals() {
        let pts = grid_plane(5, 0.05, Vector3::zeros());
        let q = PointCloud::with_normals(pts.clone(), vec![Vector3::z(); pts.len()]).unwrap();
        let p = PointCloud::with_normals(pts.clone(), vec![-Vector3::z(); pts.len()]).unwrap();
        let grid = SearchGrid::new(&pts, 0.075).unwrap();
        let s = evaluate_hypothesis(&RigidTransform::identity(), &p, &q, &grid, &RegistrationParams::default());
        assert_eq!(s.inliers, 0);
    }

    #[test]
    fn selection_prefers_ratio_then_fitness_then_index() {
        let t = RigidTransform::identity();
        let r = |ratio, fitness, idx| RegistrationResult {
            transform: t,
            inlier_ratio: ratio,
            fitness,
            hypothesis_index: idx,
        };
        assert_eq!(better(r(0.5, 0.1, 3), r(0.6, 0.2, 9)).hypothesis_index, 9);
        assert_eq!(better(r(0.5, 0.1, 3), r(0.5, 0.05, 9)).hypothesis_index, 9);
        assert_eq!(better(r(0.5, 0.1, 9), r(0.5, 0.1, 3)).hypothesis_index, 3);
        assert_eq!(better(r(0.5, 0.1, 3), r(0.5, 0.1, 9)).hypothesis_index, 3);
    }

    #[test]
    fn rejects_bad_params() {
        let c = PointCloud::new(vec![Vector3::zeros()]);
        let bad = RegistrationParams {
            similarity_tau: 1.0,
            ..Default::default()
        };
        assert!(register_global(&c, &c, &bad).is_err());
        assert!(matches!(
            register_global(&PointCloud::default(), &c, &RegistrationParams::default()),
            Err(Error::MissingData(_))
        ));
        assert!(matches!(
            register_global(&c, &c, &RegistrationParams::default()),
            Err(Error::TooFewPoints { .. })
        ));
    }
}

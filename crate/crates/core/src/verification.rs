//! Fragment pose graph and line-process loop verification.
//!
//! Every edge `(i, j, T_ij)` measures `T_ij = T_i^-1 T_j` (it maps fragment
//! `j` coordinates into fragment `i` coordinates). Its cost is the quadratic
//! form `f = xi^T Lambda xi`, where `xi` is the twist of `T_ij T_j^-1 T_i` and
//! `Lambda = sum G_p^T G_p` over the dense correspondences of the edge.
//!
//! Loop edges carry a line-process weight `l` optimized jointly with the poses:
//! `E = lambda * sum_odo f + sum_loop (l f + mu (sqrt(l) - 1)^2)`, `mu = mu_tau * kappa`.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{skew, transform_from_twist, twist_from_transform, PointCloud, RigidTransform, Twist};
use crate::loop_pipeline::Fragment;
use crate::spatial_index::SearchGrid;

/// Correspondence count below which the rejection weight is forced to zero.
const VACUOUS_KAPPA: usize = 0;

/// Quadratic-form approximation of an edge's dense alignment cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeInfo {
    pub lambda_mat: Matrix6<f64>,
    pub kappa: usize,
}

impl EdgeInfo {
    /// Unit information with no correspondences behind it.
    pub fn identity() -> Self {
        Self {
            lambda_mat: Matrix6::identity(),
            kappa: 0,
        }
    }

    pub fn vacuous() -> Self {
        Self {
            lambda_mat: Matrix6::zeros(),
            kappa: 0,
        }
    }

    /// `G_p^T G_p` for `G_p = [-[p]x | I]`.
    pub fn of_point(p: &Vector3<f64>) -> Matrix6<f64> {
        let s = skew(p);
        let mut m = Matrix6::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-s * s));
        m.fixed_view_mut::<3, 3>(0, 3).copy_from(&s);
        m.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-s));
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&Matrix3::identity());
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseEdge {
    pub i: usize,
    pub j: usize,
    /// Measured `T_i^-1 T_j`.
    pub transform: RigidTransform,
    pub info: EdgeInfo,
    /// Line-process weight; always 1 for odometry.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseGraph {
    pub poses: Vec<RigidTransform>,
    pub odometry: Vec<PoseEdge>,
    pub loops: Vec<PoseEdge>,
    /// Fragment count at the last information refresh.
    #[serde(default)]
    pub refreshed_at: usize,
}

impl PoseGraph {
    /// Chain of odometry edges matching `poses` exactly, with unit information.
    pub fn chain(poses: &[RigidTransform]) -> Self {
        let mut g = Self {
            poses: poses.to_vec(),
            ..Default::default()
        };
        for s in 1..poses.len() {
            let t = poses[s - 1].inverse() * poses[s];
            g.odometry.push(PoseEdge {
                i: s - 1,
                j: s,
                transform: t,
                info: EdgeInfo::identity(),
                weight: 1.0,
            });
        }
        g
    }

    /// Appends a pose linked to the previous one by `odometry`.
    pub fn push_pose(&mut self, pose: RigidTransform, odometry: RigidTransform, info: EdgeInfo) {
        self.poses.push(pose);
        let j = self.poses.len() - 1;
        if j > 0 {
            self.odometry.push(PoseEdge {
                i: j - 1,
                j,
                transform: odometry,
                info,
                weight: 1.0,
            });
        }
    }

    /// Adds a loop edge with weight 1.
    pub fn add_loop(&mut self, i: usize, j: usize, transform: RigidTransform, info: EdgeInfo) {
        self.loops.push(PoseEdge {
            i,
            j,
            transform,
            info,
            weight: 1.0,
        });
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.poses.len();
        for (k, e) in self.odometry.iter().enumerate() {
            if e.j != e.i + 1 || e.j >= n {
                return Err(Error::InvalidArgument(format!("odometry edge {k} is not a chain link")));
            }
        }
        for e in &self.loops {
            if e.i == e.j || e.i >= n || e.j >= n {
                return Err(Error::InvalidArgument(format!("bad loop edge ({}, {})", e.i, e.j)));
            }
            if !(0.0..=1.0).contains(&e.weight) {
                return Err(Error::InvalidArgument("loop weight outside [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Dense correspondences between `T_i P_i` and `T_j P_j` within `epsilon`,
/// summarized as `Lambda = sum G_p^T G_p` with `p` in fragment-`i` coordinates.
pub fn edge_info(p_i: &PointCloud, p_j: &PointCloud, t_i: &RigidTransform, t_j: &RigidTransform, epsilon: f64) -> Result<EdgeInfo> {
    if p_i.is_empty() || p_j.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be > 0".into()));
    }
    let world_j: Vec<_> = p_j.positions.iter().map(|q| t_j.apply(q)).collect();
    let grid = SearchGrid::new(&world_j, epsilon)?;
    // Fixed chunking keeps the floating-point summation order reproducible.
    let partial: Vec<(Matrix6<f64>, usize)> = p_i
        .positions
        .par_chunks(1024)
        .map(|chunk| {
            let mut m = Matrix6::zeros();
            let mut k = 0;
            for p in chunk {
                if grid.nn_within_squared(&t_i.apply(p), epsilon).is_some() {
                    m += EdgeInfo::of_point(p);
                    k += 1;
                }
            }
            (m, k)
        })
        .collect();
    let (lambda_mat, kappa) = partial.into_iter().fold((Matrix6::zeros(), 0), |(a, n), (b, k)| (a + b, n + k));
    if kappa == 0 {
        return Err(Error::NoCorrespondences { epsilon });
    }
    Ok(EdgeInfo { lambda_mat, kappa })
}

/// Twist of the edge error transform `T_ij T_j^-1 T_i`.
pub fn edge_error(t_i: &RigidTransform, t_j: &RigidTransform, t_ij: &RigidTransform) -> Result<Vector6<f64>> {
    let e = t_ij * &(t_j.inverse() * *t_i);
    Ok(twist_from_transform(&e)?.to_vector())
}

/// `f = xi^T Lambda xi`.
pub fn edge_residual(t_i: &RigidTransform, t_j: &RigidTransform, t_ij: &RigidTransform, info: &EdgeInfo) -> Result<f64> {
    let xi = edge_error(t_i, t_j, t_ij)?;
    Ok((xi.transpose() * info.lambda_mat * xi)[(0, 0)].max(0.0))
}

/// Minimizer of `l f + mu (sqrt(l) - 1)^2` over `[0, 1]`.
pub fn update_weight(f: f64, mu: f64) -> f64 {
    if !(mu > 0.0) {
        return 0.0;
    }
    let f = f.max(0.0);
    (mu / (mu + f)).powi(2).clamp(0.0, 1.0)
}

/// `(sqrt(l) - 1)^2`.
pub fn line_penalty(l: f64) -> f64 {
    (l.max(0.0).sqrt() - 1.0).powi(2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineProcessParams {
    pub lambda_odo: f64,
    pub mu_tau: f64,
    /// Loops with a final weight below this are rejected.
    pub reject_l: f64,
    pub max_rounds: usize,
    /// Convergence threshold on the largest pose twist update.
    pub tolerance: f64,
}

impl Default for LineProcessParams {
    fn default() -> Self {
        Self {
            lambda_odo: 1000.0,
            mu_tau: 0.2,
            reject_l: 0.25,
            max_rounds: 100,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopLabel {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct LineProcessOutcome {
    pub graph: PoseGraph,
    pub labels: Vec<LoopLabel>,
    pub rounds: usize,
    /// Objective after each full round, starting with the initial value.
    pub energy: Vec<f64>,
}

/// Full line-process objective at the graph's current poses and weights.
pub fn line_process_energy(graph: &PoseGraph, lambda_odo: f64, mu_tau: f64) -> f64 {
    let mut e = 0.0;
    for o in &graph.odometry {
        e += lambda_odo * edge_residual(&graph.poses[o.i], &graph.poses[o.j], &o.transform, &o.info).unwrap_or(f64::INFINITY);
    }
    for l in &graph.loops {
        let mu = mu_tau * l.info.kappa as f64;
        let f = if l.weight > 0.0 {
            edge_residual(&graph.poses[l.i], &graph.poses[l.j], &l.transform, &l.info).unwrap_or(f64::INFINITY)
        } else {
            0.0
        };
        e += l.weight * f + mu * line_penalty(l.weight);
    }
    e
}

/// Weight that minimizes the objective for one loop edge at fixed poses.
fn optimal_weight(graph: &PoseGraph, e: &PoseEdge, mu_tau: f64) -> f64 {
    if e.info.kappa <= VACUOUS_KAPPA {
        return 0.0;
    }
    match edge_residual(&graph.poses[e.i], &graph.poses[e.j], &e.transform, &e.info) {
        Ok(f) => update_weight(f, mu_tau * e.info.kappa as f64),
        Err(_) => 0.0,
    }
}

/// Alternates damped Gauss-Newton pose steps with closed-form weight
/// updates. Pose 0 is held fixed.
pub fn optimize_line_process(graph: &PoseGraph, params: &LineProcessParams) -> Result<LineProcessOutcome> {
    graph.validate()?;
    if graph.poses.len() < 2 {
        return Err(Error::InvalidArgument("pose graph needs at least 2 poses".into()));
    }
    let mut g = graph.clone();
    let mut solver = PoseSolver::default();
    let mut energy = vec![line_process_energy(&g, params.lambda_odo, params.mu_tau)];
    let mut rounds = 0;
    while rounds < params.max_rounds {
        rounds += 1;
        let terms = terms_of(&g, params.lambda_odo, None);
        let max_update = solver.step(&mut g.poses, &terms)?;
        let mut max_dl: f64 = 0.0;
        let weights: Vec<f64> = g.loops.iter().map(|e| optimal_weight(&g, e, params.mu_tau)).collect();
        for (e, w) in g.loops.iter_mut().zip(weights) {
            max_dl = max_dl.max((e.weight - w).abs());
            e.weight = w;
        }
        energy.push(line_process_energy(&g, params.lambda_odo, params.mu_tau));
        if max_update < params.tolerance && max_dl < params.tolerance {
            break;
        }
    }
    let labels = g
        .loops
        .iter()
        .map(|e| LoopLabel {
            i: e.i,
            j: e.j,
            weight: e.weight,
            accepted: e.weight >= params.reject_l,
        })
        .collect();
    Ok(LineProcessOutcome {
        graph: g,
        labels,
        rounds,
        energy,
    })
}

/// Recomputes every edge's information from the current poses once the
/// fragment count has grown by `every` since the last refresh. Returns
/// whether a refresh happened.
pub fn refresh_info(graph: &mut PoseGraph, fragments: &[Fragment], every: usize, epsilon: f64) -> Result<bool> {
    if every == 0 {
        return Err(Error::InvalidArgument("refresh interval must be >= 1".into()));
    }
    if fragments.len() < graph.refreshed_at + every {
        return Ok(false);
    }
    recompute_info(graph, fragments, epsilon)?;
    graph.refreshed_at = fragments.len();
    Ok(true)
}

/// Unconditional information recomputation at the current poses.
pub fn recompute_info(graph: &mut PoseGraph, fragments: &[Fragment], epsilon: f64) -> Result<()> {
    let poses = graph.poses.clone();
    let info = |e: &PoseEdge, fallback: EdgeInfo| -> Result<EdgeInfo> {
        let (fi, fj) = fragment_pair(fragments, e)?;
        info_or(edge_info(&fi.local, &fj.local, &poses[e.i], &poses[e.j], epsilon), fallback)
    };
    let odo: Vec<EdgeInfo> = graph.odometry.par_iter().map(|e| info(e, EdgeInfo::identity())).collect::<Result<_>>()?;
    let loops: Vec<EdgeInfo> = graph.loops.par_iter().map(|e| info(e, EdgeInfo::vacuous())).collect::<Result<_>>()?;
    for (e, i) in graph.odometry.iter_mut().zip(odo) {
        e.info = i;
    }
    for (e, i) in graph.loops.iter_mut().zip(loops) {
        e.info = i;
    }
    Ok(())
}

fn fragment_pair<'a>(fragments: &'a [Fragment], e: &PoseEdge) -> Result<(&'a Fragment, &'a Fragment)> {
    let get = |k: usize| fragments.get(k).ok_or_else(|| Error::MissingData(format!("fragment {k} not available")));
    Ok((get(e.i)?, get(e.j)?))
}

/// Maps a missing-correspondence or empty-cloud failure to `fallback`.
pub fn info_or(r: Result<EdgeInfo>, fallback: EdgeInfo) -> Result<EdgeInfo> {
    match r {
        Ok(i) => Ok(i),
        Err(Error::NoCorrespondences { .. }) | Err(Error::EmptyCloud) => Ok(fallback),
        Err(e) => Err(e),
    }
}

/// One weighted quadratic edge term of a pose-graph objective.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Term {
    pub i: usize,
    pub j: usize,
    pub t_ij: RigidTransform,
    pub lambda: Matrix6<f64>,
    pub weight: f64,
}

/// Terms of `graph`: odometry scaled by `lambda_odo`, loops by their weight
/// (or `loop_weights` when given). Zero-weight loops are left out.
pub(crate) fn terms_of(graph: &PoseGraph, lambda_odo: f64, loop_weights: Option<&[f64]>) -> Vec<Term> {
    let mut terms: Vec<Term> = graph
        .odometry
        .iter()
        .map(|e| Term {
            i: e.i,
            j: e.j,
            t_ij: e.transform,
            lambda: e.info.lambda_mat,
            weight: lambda_odo,
        })
        .collect();
    for (k, e) in graph.loops.iter().enumerate() {
        let w = loop_weights.map_or(e.weight, |w| w[k]);
        // Edges outside the small-angle regime sit out the pose step.
        if w > 0.0 && edge_error(&graph.poses[e.i], &graph.poses[e.j], &e.transform).is_ok() {
            terms.push(Term {
                i: e.i,
                j: e.j,
                t_ij: e.transform,
                lambda: e.info.lambda_mat,
                weight: w,
            });
        }
    }
    terms
}

pub(crate) fn terms_cost(poses: &[RigidTransform], terms: &[Term]) -> f64 {
    terms
        .iter()
        .map(|t| match edge_error(&poses[t.i], &poses[t.j], &t.t_ij) {
            Ok(xi) => t.weight * (xi.transpose() * t.lambda * xi)[(0, 0)],
            Err(_) => f64::INFINITY,
        })
        .sum()
}

fn perturb(t: &RigidTransform, k: usize, h: f64) -> RigidTransform {
    let mut v = Vector6::zeros();
    v[k] = h;
    t * &transform_from_twist(&Twist::from_vector(&v))
}

/// Error twist and its Jacobians with respect to right perturbations of
/// `T_i` and `T_j`, by central differences.
fn linearize(poses: &[RigidTransform], t: &Term) -> Result<(Vector6<f64>, Matrix6<f64>, Matrix6<f64>)> {
    const H: f64 = 1e-6;
    let (ti, tj) = (poses[t.i], poses[t.j]);
    let xi = edge_error(&ti, &tj, &t.t_ij)?;
    let mut ji = Matrix6::zeros();
    let mut jj = Matrix6::zeros();
    for k in 0..6 {
        let dp = edge_error(&perturb(&ti, k, H), &tj, &t.t_ij)?;
        let dm = edge_error(&perturb(&ti, k, -H), &tj, &t.t_ij)?;
        ji.set_column(k, &((dp - dm) / (2.0 * H)));
        let dp = edge_error(&ti, &perturb(&tj, k, H), &t.t_ij)?;
        let dm = edge_error(&ti, &perturb(&tj, k, -H), &t.t_ij)?;
        jj.set_column(k, &((dp - dm) / (2.0 * H)));
    }
    Ok((xi, ji, jj))
}

/// Fails unless every pose is connected to pose 0 through terms.
pub(crate) fn check_connected(n: usize, terms: &[Term]) -> Result<()> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for t in terms {
        let (a, b) = (find(&mut parent, t.i), find(&mut parent, t.j));
        parent[a] = b;
    }
    let root = find(&mut parent, 0);
    for k in 1..n {
        if find(&mut parent, k) != root {
            return Err(Error::SingularSystem(format!("pose {k} is not connected to pose 0")));
        }
    }
    Ok(())
}

/// Levenberg-Marquardt state for pose graphs with pose 0 fixed.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PoseSolver {
    pub damping: f64,
}

impl Default for PoseSolver {
    fn default() -> Self {
        Self { damping: 1e-6 }
    }
}

impl PoseSolver {
    const MAX_TRIES: usize = 30;

    /// One accepted damped step, returning the largest twist update. The
    /// update is zero when no damping level decreases the cost.
    pub fn step(&mut self, poses: &mut [RigidTransform], terms: &[Term]) -> Result<f64> {
        let n = poses.len();
        check_connected(n, terms)?;
        let dim = 6 * (n - 1);
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut b = DVector::<f64>::zeros(dim);
        let lin: Vec<_> = terms.par_iter().map(|t| linearize(poses, t)).collect::<Result<_>>()?;
        for (t, (xi, ji, jj)) in terms.iter().zip(&lin) {
            let wl = t.lambda * t.weight;
            let blocks = [(t.i, ji), (t.j, jj)];
            for &(a, ja) in &blocks {
                if a == 0 {
                    continue;
                }
                let oa = 6 * (a - 1);
                let mut seg = b.fixed_rows_mut::<6>(oa);
                seg += ja.transpose() * wl * xi;
                for &(c, jc) in &blocks {
                    if c == 0 {
                        continue;
                    }
                    let oc = 6 * (c - 1);
                    let mut blk = h.fixed_view_mut::<6, 6>(oa, oc);
                    blk += ja.transpose() * wl * jc;
                }
            }
        }
        let cost0 = terms_cost(poses, terms);
        if dim == 0 || b.amax() == 0.0 {
            return Ok(0.0);
        }
        let diag: Vec<f64> = (0..dim).map(|k| h[(k, k)]).collect();
        for _ in 0..Self::MAX_TRIES {
            let mut a = h.clone();
            for (k, d) in diag.iter().enumerate() {
                a[(k, k)] += self.damping * d.max(1e-9);
            }
            let Some(chol) = a.cholesky() else {
                self.damping *= 10.0;
                continue;
            };
            let delta = chol.solve(&(-&b));
            let mut candidate = poses.to_vec();
            let mut max_update: f64 = 0.0;
            for k in 1..n {
                let d = delta.fixed_rows::<6>(6 * (k - 1)).into_owned();
                max_update = max_update.max(d.amax());
                candidate[k] = (poses[k] * transform_from_twist(&Twist::from_vector(&d))).orthonormalized();
            }
            let cost = terms_cost(&candidate, terms);
            if cost <= cost0 {
                poses.copy_from_slice(&candidate);
                self.damping = (self.damping / 10.0).max(1e-12);
                return Ok(max_update);
            }
            self.damping *= 10.0;
        }
        Ok(0.0)
    }
}

//! Batch loop-closure pipeline over a recorded sequence.
//!
//! Frames are fused into fragments of `k`. After each new fragment, overlap
//! proposals are registered, verified with the line process, and accepted
//! loops drive pose-graph optimization. At the end the fragment corrections
//! are pushed down to frames and keyframes, bundle adjustment refines the
//! keyframes, and the surfel map is deformed to the final poses.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use rustc_hash::FxHashSet;

use crate::error::{Error, Result};
use crate::geometry::{Keyframe, RigidTransform};
use crate::harness::config::{assign, unknown_key, FlatConfig};
use crate::harness::dataset::Dataset;
use crate::harness::metrics::{eval_ate_rmse, eval_surface};
use crate::harness::reglog::{LogEntry, RegistrationLog};
use crate::harness::trajectory::{TrajectoryFile, TrajectoryRecord};
use crate::loop_pipeline::{make_fragment, propose_loops, Fragment, OverlapParams};
use crate::map_correction::{correct_surfels, SurfelMap};
use crate::optimization::{bundle_adjust, pose_graph_optimize, BaConfig, BaProblem, PgoParams};
use crate::registration::{register_global, RegistrationParams};
use crate::verification::{edge_info, info_or, optimize_line_process, refresh_info, EdgeInfo, LineProcessParams, PoseGraph};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Frames per fragment.
    pub k: usize,
    pub registration: RegistrationParams,
    pub mu_tau: f64,
    pub lambda_odo: f64,
    pub reject_l: f64,
    /// Information refresh interval, in fragments.
    pub refresh_every: usize,
    pub overlap: OverlapParams,
    /// Correspondence distance for edge information (m).
    pub epsilon: f64,
    /// Voxel size used when fusing fragments (m).
    pub fragment_leaf: f64,
    /// Odometry weight of the final pose-graph solve.
    pub pgo_lambda_odo: f64,
    pub propose_loops: bool,
    pub bundle_adjust: bool,
    /// Bundle adjustment is discarded when it moves a keyframe further than
    /// this from its pose-graph position (m).
    pub ba_max_shift: f64,
    pub correct_map: bool,
    /// Compute metrics when ground truth is available.
    pub evaluate: bool,
    /// Rigidly align trajectories before ATE.
    pub align_ate: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: 50,
            registration: RegistrationParams::default(),
            mu_tau: 0.2,
            lambda_odo: 1000.0,
            reject_l: 0.25,
            refresh_every: 50,
            overlap: OverlapParams::default(),
            epsilon: 0.05,
            fragment_leaf: 0.05,
            pgo_lambda_odo: 1.0,
            propose_loops: true,
            bundle_adjust: true,
            ba_max_shift: 0.25,
            correct_map: true,
            evaluate: true,
            align_ate: true,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.registration.validate()?;
        if self.k == 0 || self.refresh_every == 0 {
            return Err(Error::InvalidArgument("k and refresh_every must be >= 1".into()));
        }
        if !(self.mu_tau > 0.0 && self.lambda_odo > 0.0 && self.pgo_lambda_odo > 0.0) {
            return Err(Error::InvalidArgument("mu_tau and odometry weights must be > 0".into()));
        }
        if !(self.epsilon > 0.0 && self.fragment_leaf > 0.0 && self.overlap.d_overlap > 0.0) {
            return Err(Error::InvalidArgument("epsilon, fragment_leaf and d_overlap must be > 0".into()));
        }
        if !(self.ba_max_shift > 0.0) {
            return Err(Error::InvalidArgument("ba_max_shift must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.reject_l) {
            return Err(Error::InvalidArgument("reject_l must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn line_process(&self) -> LineProcessParams {
        LineProcessParams {
            lambda_odo: self.lambda_odo,
            mu_tau: self.mu_tau,
            reject_l: self.reject_l,
            ..LineProcessParams::default()
        }
    }

    pub fn pgo(&self) -> PgoParams {
        PgoParams {
            lambda_odo: self.pgo_lambda_odo,
            min_weight: self.reject_l,
            ..PgoParams::default()
        }
    }

    pub fn from_flat(c: &FlatConfig) -> Result<Self> {
        let mut s = Self::default();
        let mut angle_deg = s.registration.normal_angle_max.to_degrees();
        let mut max_fitness = None;
        for (key, value, line) in &c.entries {
            let (v, l) = (value.as_str(), *line);
            let r = &mut s.registration;
            match key.as_str() {
                "k" => assign(&mut s.k, key, v, l)?,
                "leaf" => assign(&mut r.leaf, key, v, l)?,
                "normal_radius" => assign(&mut r.normal_radius, key, v, l)?,
                "feature_radius" => assign(&mut r.feature_radius, key, v, l)?,
                "hypothesis_count" => assign(&mut r.hypothesis_count, key, v, l)?,
                "similarity_tau" => assign(&mut r.similarity_tau, key, v, l)?,
                "d_max" => assign(&mut r.d_max, key, v, l)?,
                "min_inlier_ratio" => assign(&mut r.min_inlier_ratio, key, v, l)?,
                "max_fitness" => {
                    let mut f = 0.0;
                    assign(&mut f, key, v, l)?;
                    max_fitness = Some(f);
                }
                "normal_angle_deg" => assign(&mut angle_deg, key, v, l)?,
                "mu_tau" => assign(&mut s.mu_tau, key, v, l)?,
                "lambda_odo" => assign(&mut s.lambda_odo, key, v, l)?,
                "reject_l" => assign(&mut s.reject_l, key, v, l)?,
                "refresh_every" => assign(&mut s.refresh_every, key, v, l)?,
                "d_overlap" => assign(&mut s.overlap.d_overlap, key, v, l)?,
                "o_min" => assign(&mut s.overlap.o_min, key, v, l)?,
                "epsilon" => assign(&mut s.epsilon, key, v, l)?,
                "fragment_leaf" => assign(&mut s.fragment_leaf, key, v, l)?,
                "pgo_lambda_odo" => assign(&mut s.pgo_lambda_odo, key, v, l)?,
                "propose_loops" => assign(&mut s.propose_loops, key, v, l)?,
                "bundle_adjust" => assign(&mut s.bundle_adjust, key, v, l)?,
                "ba_max_shift" => assign(&mut s.ba_max_shift, key, v, l)?,
                "correct_map" => assign(&mut s.correct_map, key, v, l)?,
                "evaluate" => assign(&mut s.evaluate, key, v, l)?,
                "align_ate" => assign(&mut s.align_ate, key, v, l)?,
                "seed" => assign(&mut s.seed, key, v, l)?,
                _ => return Err(unknown_key(key, l)),
            }
        }
        s.registration.normal_angle_max = angle_deg.to_radians();
        // An unset fitness bound follows d_max.
        s.registration.max_fitness = max_fitness.unwrap_or(s.registration.d_max * s.registration.d_max / 2.0);
        s.registration.seed = s.seed;
        s.validate()?;
        Ok(s)
    }

    pub fn to_flat(&self) -> FlatConfig {
        let r = &self.registration;
        let mut c = FlatConfig::default();
        c.push("k", self.k);
        c.push("leaf", r.leaf);
        c.push("normal_radius", r.normal_radius);
        c.push("feature_radius", r.feature_radius);
        c.push("hypothesis_count", r.hypothesis_count);
        c.push("similarity_tau", r.similarity_tau);
        c.push("d_max", r.d_max);
        c.push("min_inlier_ratio", r.min_inlier_ratio);
        c.push("max_fitness", r.max_fitness);
        c.push("normal_angle_deg", r.normal_angle_max.to_degrees());
        c.push("mu_tau", self.mu_tau);
        c.push("lambda_odo", self.lambda_odo);
        c.push("reject_l", self.reject_l);
        c.push("refresh_every", self.refresh_every);
        c.push("d_overlap", self.overlap.d_overlap);
        c.push("o_min", self.overlap.o_min);
        c.push("epsilon", self.epsilon);
        c.push("fragment_leaf", self.fragment_leaf);
        c.push("pgo_lambda_odo", self.pgo_lambda_odo);
        c.push("propose_loops", self.propose_loops);
        c.push("bundle_adjust", self.bundle_adjust);
        c.push("ba_max_shift", self.ba_max_shift);
        c.push("correct_map", self.correct_map);
        c.push("evaluate", self.evaluate);
        c.push("align_ate", self.align_ate);
        c.push("seed", self.seed);
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoopStatus {
    /// Registration found no alignment.
    Unregistered,
    Rejected,
    Accepted,
}

impl LoopStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            LoopStatus::Unregistered => "unregistered",
            LoopStatus::Rejected => "rejected",
            LoopStatus::Accepted => "accepted",
        }
    }
}

/// Outcome for one proposed fragment pair; `i` is the earlier fragment.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopRecord {
    pub i: usize,
    pub j: usize,
    pub overlap: f64,
    /// Maps fragment `j` coordinates into fragment `i` coordinates.
    pub transform: Option<RigidTransform>,
    pub inlier_ratio: f64,
    pub weight: f64,
    pub status: LoopStatus,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineReport {
    pub frames: usize,
    pub fragments: usize,
    pub loops: Vec<LoopRecord>,
    pub ba_rmse: Option<f64>,
    /// Named metrics, in a fixed order.
    pub metrics: Vec<(String, f64)>,
    /// Wall time per stage (s). Not deterministic.
    pub timings: Vec<(String, f64)>,
}

impl PipelineReport {
    pub fn count(&self, status: LoopStatus) -> usize {
        self.loops.iter().filter(|l| l.status == status).count()
    }

    /// Loops for which registration produced a candidate.
    pub fn registered(&self) -> usize {
        self.loops.iter().filter(|l| l.transform.is_some()).count()
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// Report lines without wall-clock timings; identical across runs.
    pub fn deterministic_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "frames {}", self.frames).unwrap();
        writeln!(s, "fragments {}", self.fragments).unwrap();
        writeln!(s, "loops_proposed {}", self.loops.len()).unwrap();
        writeln!(s, "loops_registered {}", self.registered()).unwrap();
        writeln!(s, "loops_accepted {}", self.count(LoopStatus::Accepted)).unwrap();
        writeln!(s, "loops_rejected {}", self.count(LoopStatus::Rejected)).unwrap();
        for l in &self.loops {
            writeln!(
                s,
                "loop {} {} status={} overlap={:.6} inlier_ratio={:.6} weight={:.6}",
                l.i,
                l.j,
                l.status.as_str(),
                l.overlap,
                l.inlier_ratio,
                l.weight
            )
            .unwrap();
        }
        if let Some(r) = self.ba_rmse {
            writeln!(s, "ba_rmse_px {r}").unwrap();
        }
        for (k, v) in &self.metrics {
            writeln!(s, "{k} {v}").unwrap();
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = self.deterministic_text();
        for (k, v) in &self.timings {
            writeln!(s, "time_{k}_s {v:.6}").unwrap();
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub trajectory: TrajectoryFile,
    pub keyframes: Vec<Keyframe>,
    /// Trajectory after pose-graph optimization, before bundle adjustment.
    pub pgo_trajectory: TrajectoryFile,
    pub map: Option<SurfelMap>,
    /// Accepted loops.
    pub loop_log: RegistrationLog,
    pub report: PipelineReport,
}

struct Timer(Vec<(String, f64)>);

impl Timer {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        let dt = t.elapsed().as_secs_f64();
        match self.0.iter_mut().find(|(s, _)| s == stage) {
            Some((_, acc)) => *acc += dt,
            None => self.0.push((stage.to_string(), dt)),
        }
        out
    }
}

/// Runs the whole back-end over `data`.
pub fn run_pipeline(data: &Dataset, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    if data.frames.is_empty() {
        return Err(Error::MissingData("dataset has no frames".into()));
    }
    let start = Instant::now();
    let mut timer = Timer(Vec::new());
    let identity = RigidTransform::identity();

    let mut fragments: Vec<Fragment> = Vec::new();
    // Odometry pose of each fragment anchor.
    let mut anchors: Vec<RigidTransform> = Vec::new();
    let mut graph = PoseGraph::default();
    let mut loops: Vec<LoopRecord> = Vec::new();
    let mut tried: FxHashSet<(usize, usize)> = FxHashSet::default();
    let mut accepted: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut optimized = false;

    for (id, chunk) in data.frames.chunks(cfg.k).enumerate() {
        let mut frag = timer.time("fragments", || make_fragment(id, id * cfg.k, chunk, &data.keyframes, cfg.fragment_leaf))?;
        let odo_pose = frag.pose;
        if id == 0 {
            graph.push_pose(odo_pose, identity, EdgeInfo::identity());
        } else {
            let rel = anchors[id - 1].inverse() * odo_pose;
            let prev = &fragments[id - 1];
            let info = timer.time("verification", || {
                info_or(edge_info(&prev.local, &frag.local, &identity, &rel, cfg.epsilon), EdgeInfo::identity())
            })?;
            let pose = graph.poses[id - 1] * rel;
            graph.push_pose(pose, rel, info);
            frag.set_pose(pose);
        }
        anchors.push(odo_pose);
        fragments.push(frag);
        if !cfg.propose_loops {
            continue;
        }

        let proposals = timer.time("proposals", || propose_loops(&fragments, &graph, &cfg.overlap))?;
        let mut added = false;
        for p in proposals {
            let (i, j) = (p.target, p.source);
            if !tried.insert((i, j)) {
                continue;
            }
            let params = RegistrationParams {
                seed: pair_seed(cfg.seed, i, j),
                ..cfg.registration.clone()
            };
            let (earlier, later) = (&fragments[i].local, &fragments[j].local);
            let result = timer.time("registration", || register_global(later, earlier, &params));
            let mut record = LoopRecord {
                i,
                j,
                overlap: p.overlap_ratio,
                transform: None,
                inlier_ratio: 0.0,
                weight: 0.0,
                status: LoopStatus::Unregistered,
            };
            match result {
                Ok(Some(r)) => {
                    record.transform = Some(r.transform);
                    record.inlier_ratio = r.inlier_ratio;
                    let info = timer.time("verification", || edge_info(earlier, later, &identity, &r.transform, cfg.epsilon));
                    match info {
                        Ok(info) => {
                            graph.add_loop(i, j, r.transform, info);
                            added = true;
                        }
                        Err(Error::NoCorrespondences { .. }) => {}
                        Err(e) => return Err(e),
                    }
                }
                Ok(None) => {}
                Err(e) => log::debug!("registration of ({i}, {j}) failed: {e}"),
            }
            loops.push(record);
        }
        if !added {
            continue;
        }

        let labels = timer.time("verification", || -> Result<_> {
            let outcome = optimize_line_process(&graph, &cfg.line_process())?;
            graph = outcome.graph;
            Ok(outcome.labels)
        })?;
        for (edge, label) in graph.loops.iter_mut().zip(&labels) {
            let key = (label.i, label.j);
            if label.accepted || accepted.contains(&key) {
                accepted.insert(key);
                edge.weight = edge.weight.max(cfg.reject_l);
            } else {
                // Stays out until a refresh recomputes its information.
                edge.info = EdgeInfo::vacuous();
                edge.weight = 0.0;
            }
        }
        if !accepted.is_empty() {
            let pgo = timer.time("optimization", || pose_graph_optimize(&graph, &cfg.pgo()))?;
            graph.poses = pgo.poses;
            optimized = true;
        }
        for (f, p) in fragments.iter_mut().zip(&graph.poses) {
            f.set_pose(*p);
        }
        timer.time("verification", || refresh_info(&mut graph, &fragments, cfg.refresh_every, cfg.epsilon))?;
    }

    for rec in &mut loops {
        if let Some(e) = graph.loops.iter().find(|e| (e.i, e.j) == (rec.i, rec.j)) {
            rec.weight = e.weight;
            rec.status = if accepted.contains(&(rec.i, rec.j)) {
                LoopStatus::Accepted
            } else {
                LoopStatus::Rejected
            };
        }
    }

    // Per-fragment corrections applied to the frames and keyframes inside.
    let corrections: Vec<Option<RigidTransform>> = graph
        .poses
        .iter()
        .zip(&anchors)
        .map(|(new, old)| optimized.then(|| *new * old.inverse()))
        .collect();
    let fragment_of_time = |t: f64| nearest_frame(data, t) / cfg.k;
    let apply = |c: &Option<RigidTransform>, pose: &RigidTransform| match c {
        Some(c) => (*c * *pose).orthonormalized(),
        None => *pose,
    };
    let mut frame_poses: Vec<RigidTransform> = data
        .frames
        .iter()
        .enumerate()
        .map(|(k, f)| apply(&corrections[k / cfg.k], &f.pose))
        .collect();
    let mut keyframes: Vec<Keyframe> = data
        .keyframes
        .iter()
        .map(|kf| Keyframe {
            pose: apply(&corrections[fragment_of_time(kf.timestamp)], &kf.pose),
            ..*kf
        })
        .collect();
    let pgo_frame_poses = frame_poses.clone();

    let mut ba_rmse = None;
    if cfg.bundle_adjust && !accepted.is_empty() {
        if let Some(problem) = &data.ba {
            let refined = timer.time("bundle_adjustment", || run_ba(problem, &data.keyframes, &keyframes));
            match refined {
                Ok((kfs, _)) if max_shift(&kfs, &keyframes) > cfg.ba_max_shift => {
                    log::warn!(
                        "bundle adjustment discarded: a keyframe moved {:.3} m from the pose graph",
                        max_shift(&kfs, &keyframes)
                    );
                }
                Ok((kfs, rmse)) => {
                    let deltas: Vec<RigidTransform> = kfs.iter().zip(&keyframes).map(|(a, b)| a.pose * b.pose.inverse()).collect();
                    for (k, f) in data.frames.iter().enumerate() {
                        if let Some(n) = nearest_keyframe(&kfs, f.timestamp) {
                            frame_poses[k] = (deltas[n] * frame_poses[k]).orthonormalized();
                        }
                    }
                    keyframes = kfs;
                    ba_rmse = Some(rmse);
                }
                Err(e @ (Error::InsufficientObservations(_) | Error::SingularSystem(_))) => {
                    log::warn!("bundle adjustment skipped: {e}");
                }
                Err(e) => return Err(e),
            }
        }
    }

    let map = match &data.surfels {
        Some(m) if cfg.correct_map => Some(timer.time("map_correction", || correct_surfels(m, &data.keyframes, &keyframes))?),
        Some(m) => Some(m.clone()),
        None => None,
    };

    let timestamps: Vec<f64> = data.frames.iter().map(|f| f.timestamp).collect();
    let trajectory = TrajectoryFile::from_poses(&timestamps, &frame_poses)?;
    let pgo_trajectory = TrajectoryFile::from_poses(&timestamps, &pgo_frame_poses)?;

    let mut metrics = Vec::new();
    if cfg.evaluate {
        timer.time("evaluation", || -> Result<()> {
            if let Some(truth) = &data.truth {
                let odo = TrajectoryFile {
                    records: data.frames.iter().map(|f| TrajectoryRecord::new(f.timestamp, &f.pose)).collect(),
                };
                metrics.push(("ate_odometry_m".to_string(), eval_ate_rmse(&odo, truth, cfg.align_ate)?));
                metrics.push(("ate_pgo_m".to_string(), eval_ate_rmse(&pgo_trajectory, truth, cfg.align_ate)?));
                metrics.push(("ate_final_m".to_string(), eval_ate_rmse(&trajectory, truth, cfg.align_ate)?));
            }
            if let (Some(truth), Some(before), Some(after)) = (&data.truth_surface, &data.surfels, &map) {
                if !before.is_empty() {
                    let (m0, d0) = eval_surface(&positions(before), truth)?;
                    let (m1, d1) = eval_surface(&positions(after), truth)?;
                    metrics.push(("surface_mean_before_m".to_string(), m0));
                    metrics.push(("surface_median_before_m".to_string(), d0));
                    metrics.push(("surface_mean_after_m".to_string(), m1));
                    metrics.push(("surface_median_after_m".to_string(), d1));
                }
            }
            Ok(())
        })?;
    }

    let n = fragments.len();
    let loop_log = RegistrationLog {
        entries: loops
            .iter()
            .filter(|l| l.status == LoopStatus::Accepted)
            .filter_map(|l| {
                l.transform.map(|transform| LogEntry {
                    i: l.i,
                    j: l.j,
                    n,
                    transform,
                })
            })
            .collect(),
    };
    let mut timings = timer.0;
    timings.push(("total".to_string(), start.elapsed().as_secs_f64()));
    Ok(PipelineOutput {
        trajectory,
        keyframes,
        pgo_trajectory,
        map,
        loop_log,
        report: PipelineReport {
            frames: data.frames.len(),
            fragments: n,
            loops,
            ba_rmse,
            metrics,
            timings,
        },
    })
}

fn pair_seed(seed: u64, i: usize, j: usize) -> u64 {
    seed ^ ((i as u64) << 32 | j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn positions(m: &SurfelMap) -> crate::geometry::PointCloud {
    crate::geometry::PointCloud::new(m.surfels.iter().map(|s| s.position).collect())
}

fn nearest_frame(data: &Dataset, t: f64) -> usize {
    let k = data.frames.partition_point(|f| f.timestamp < t);
    if k == 0 {
        return 0;
    }
    if k == data.frames.len() || (t - data.frames[k - 1].timestamp) <= (data.frames[k].timestamp - t) {
        k - 1
    } else {
        k
    }
}

fn nearest_keyframe(kfs: &[Keyframe], t: f64) -> Option<usize> {
    (0..kfs.len()).min_by(|&a, &b| (kfs[a].timestamp - t).abs().total_cmp(&(kfs[b].timestamp - t).abs()))
}

/// Bundle adjustment started from the corrected keyframes. Landmarks move
/// with the correction of their first observer.
fn max_shift(a: &[Keyframe], b: &[Keyframe]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.pose.camera_center() - y.pose.camera_center()).norm())
        .fold(0.0, f64::max)
}

fn run_ba(problem: &BaProblem, old: &[Keyframe], new: &[Keyframe]) -> Result<(Vec<Keyframe>, f64)> {
    let pose_of = |kfs: &[Keyframe], id: usize| {
        kfs.iter()
            .find(|k| k.id == id)
            .map(|k| k.pose)
            .ok_or_else(|| Error::MissingData(format!("keyframe {id} missing from the landmark problem")))
    };
    let mut p = problem.clone();
    for kf in &mut p.keyframes {
        kf.pose = pose_of(new, kf.id)?;
    }
    for lm in &mut p.landmarks {
        if let Some(o) = problem.observations.iter().find(|o| o.landmark == lm.id) {
            let c = pose_of(new, o.keyframe)? * pose_of(old, o.keyframe)?.inverse();
            lm.position = c.apply(&lm.position);
        }
    }
    let r = bundle_adjust(&p, &BaConfig::default())?;
    // Reprojection leaves scale free. Odometry steps are metric even when
    // their headings drift, so the path length of the keyframes fixes it.
    let path = |poses: &mut dyn Iterator<Item = RigidTransform>| {
        let c: Vec<_> = poses.map(|t| t.camera_center()).collect();
        c.windows(2).map(|w| (w[1] - w[0]).norm()).sum::<f64>()
    };
    let metric = path(&mut problem.keyframes.iter().map(|k| k.pose));
    let solved = path(&mut r.keyframes.iter().map(|k| k.pose));
    let scale = if solved > 0.0 { metric / solved } else { 1.0 };
    let c0 = r.keyframes[0].pose.camera_center();
    let kfs = new
        .iter()
        .map(|k| {
            let pose = match r.keyframes.iter().find(|b| b.id == k.id) {
                Some(b) => RigidTransform {
                    rotation: b.pose.rotation,
                    translation: c0 + (b.pose.camera_center() - c0) * scale,
                },
                None => k.pose,
            };
            Keyframe { pose, ..*k }
        })
        .collect();
    Ok((kfs, r.rmse))
}

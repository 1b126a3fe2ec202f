use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, SMatrix, Vector2, Vector3, Vector6};
use rayon::prelude::*;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use super::huber;
use super::huber_weight;
use crate::error::{Error, Result};
use crate::geometry::{skew, transform_from_twist, CameraIntrinsics, Keyframe, Point, RigidTransform, Twist};

type Matrix2x6 = SMatrix<f64, 2, 6>;
type Matrix6x3 = SMatrix<f64, 6, 3>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: usize,
    pub position: Point,
}

/// Pixel measurement of a landmark in a keyframe, with isotropic pixel sigma.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub keyframe: usize,
    pub landmark: usize,
    pub pixel: Vector2<f64>,
    pub scale_sigma: f64,
}

/// Cameras, points and measurements. Keyframe poses are camera-to-world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaProblem {
    pub intrinsics: CameraIntrinsics,
    pub keyframes: Vec<Keyframe>,
    pub landmarks: Vec<Landmark>,
    pub observations: Vec<Observation>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaConfig {
    /// Huber threshold on the sigma-whitened residual norm.
    pub huber_delta: f64,
    pub max_iterations: usize,
    /// Stop when an accepted step changes the objective by less than this fraction.
    pub relative_tolerance: f64,
    pub initial_damping: f64,
    /// Eliminate landmarks when they outnumber keyframes by this factor.
    pub schur_ratio: usize,
}

impl Default for BaConfig {
    fn default() -> Self {
        Self {
            huber_delta: 2.45,
            max_iterations: 50,
            relative_tolerance: 1e-8,
            initial_damping: 1e-6,
            schur_ratio: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaResult {
    pub keyframes: Vec<Keyframe>,
    pub landmarks: Vec<Landmark>,
    /// Root mean squared reprojection error over observations in front of their camera (px).
    pub rmse: f64,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
}

/// Whitened residual `(x - pi(T_cw X)) / sigma` with its Jacobians with
/// respect to a left perturbation `X(delta) T_cw` and to the point.
pub fn observation_jacobian(
    k: &CameraIntrinsics,
    t_cw: &RigidTransform,
    x: &Point,
    pixel: &Vector2<f64>,
    sigma: f64,
) -> Option<(Vector2<f64>, Matrix2x6, Matrix2x3<f64>)> {
    let xc = t_cw.apply(x);
    let proj = k.project_camera(&xc)?;
    let r = (pixel - proj) / sigma;
    let iz = 1.0 / xc.z;
    let jpi = Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * xc.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * xc.y * iz * iz,
    );
    let s = -1.0 / sigma;
    let mut jpose = Matrix2x6::zeros();
    jpose.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jpi * (-skew(&xc)) * s));
    jpose.fixed_view_mut::<2, 3>(0, 3).copy_from(&(jpi * s));
    let jpoint = jpi * t_cw.rotation * s;
    Some((r, jpose, jpoint))
}

struct Indexed {
    cam: Vec<usize>,
    pt: Vec<usize>,
}

fn index_problem(p: &BaProblem) -> Result<Indexed> {
    let kf: FxHashMap<usize, usize> = p.keyframes.iter().enumerate().map(|(i, k)| (k.id, i)).collect();
    let lm: FxHashMap<usize, usize> = p.landmarks.iter().enumerate().map(|(i, l)| (l.id, i)).collect();
    let mut cam = Vec::with_capacity(p.observations.len());
    let mut pt = Vec::with_capacity(p.observations.len());
    let mut counts = vec![0usize; p.landmarks.len()];
    for o in &p.observations {
        let c = *kf
            .get(&o.keyframe)
            .ok_or_else(|| Error::MissingData(format!("observation of unknown keyframe {}", o.keyframe)))?;
        let l = *lm
            .get(&o.landmark)
            .ok_or_else(|| Error::MissingData(format!("observation of unknown landmark {}", o.landmark)))?;
        if !(o.scale_sigma > 0.0) {
            return Err(Error::InvalidArgument("observation scale_sigma must be > 0".into()));
        }
        cam.push(c);
        pt.push(l);
        counts[l] += 1;
    }
    if let Some((i, &c)) = counts.iter().enumerate().find(|(_, &c)| c < 2) {
        return Err(Error::InsufficientObservations(format!(
            "landmark {} has {c} observation(s), needs 2",
            p.landmarks[i].id
        )));
    }
    Ok(Indexed { cam, pt })
}

struct State {
    t_cw: Vec<RigidTransform>,
    x: Vec<Point>,
}

impl State {
    fn cost(&self, p: &BaProblem, idx: &Indexed, delta: f64) -> f64 {
        p.observations
            .iter()
            .enumerate()
            .filter_map(|(o, obs)| {
                let proj = p.intrinsics.project_camera(&self.t_cw[idx.cam[o]].apply(&self.x[idx.pt[o]]))?;
                Some(huber(((obs.pixel - proj) / obs.scale_sigma).norm(), delta))
            })
            .sum()
    }

    fn rmse(&self, p: &BaProblem, idx: &Indexed) -> f64 {
        let (sum, n) = p
            .observations
            .iter()
            .enumerate()
            .filter_map(|(o, obs)| {
                let proj = p.intrinsics.project_camera(&self.t_cw[idx.cam[o]].apply(&self.x[idx.pt[o]]))?;
                Some((obs.pixel - proj).norm_squared())
            })
            .fold((0.0, 0usize), |(s, n), e| (s + e, n + 1));
        if n == 0 {
            0.0
        } else {
            (sum / n as f64).sqrt()
        }
    }
}

/// Per-observation linearization: weighted blocks of the normal equations.
struct Lin {
    cam: usize,
    pt: usize,
    hcc: SMatrix<f64, 6, 6>,
    hcp: Matrix6x3,
    hpp: Matrix3<f64>,
    bc: Vector6<f64>,
    bp: Vector3<f64>,
}

/// Robust, sigma-weighted reprojection bundle adjustment. The first keyframe is held fixed.
pub fn bundle_adjust(problem: &BaProblem, config: &BaConfig) -> Result<BaResult> {
    problem.intrinsics.validate()?;
    if problem.keyframes.is_empty() {
        return Err(Error::InsufficientObservations("no keyframes".into()));
    }
    let idx = index_problem(problem)?;
    let nc = problem.keyframes.len();
    let np = problem.landmarks.len();
    let mut state = State {
        t_cw: problem.keyframes.iter().map(|k| k.pose.inverse()).collect(),
        x: problem.landmarks.iter().map(|l| l.position).collect(),
    };
    let delta = config.huber_delta;
    let initial_cost = state.cost(problem, &idx, delta);
    let mut cost = initial_cost;
    let mut damping = config.initial_damping;
    let mut iterations = 0;
    let use_schur = np > config.schur_ratio * nc;

    while iterations < config.max_iterations && cost > 1e-30 {
        iterations += 1;
        let lins: Vec<Lin> = problem
            .observations
            .par_iter()
            .enumerate()
            .filter_map(|(o, obs)| {
                let (c, l) = (idx.cam[o], idx.pt[o]);
                let (r, jc, jp) = observation_jacobian(&problem.intrinsics, &state.t_cw[c], &state.x[l], &obs.pixel, obs.scale_sigma)?;
                let w = huber_weight(r.norm(), delta);
                Some(Lin {
                    cam: c,
                    pt: l,
                    hcc: jc.transpose() * jc * w,
                    hcp: jc.transpose() * jp * w,
                    hpp: jp.transpose() * jp * w,
                    bc: jc.transpose() * r * w,
                    bp: jp.transpose() * r * w,
                })
            })
            .collect();

        let mut accepted = false;
        let mut converged = false;
        let mut failures = 0;
        while failures < 10 {
            let step = if use_schur {
                solve_schur(&lins, nc, np, damping)
            } else {
                solve_dense(&lins, nc, np, damping)
            };
            let Some((dc, dp)) = step else {
                damping *= 10.0;
                failures += 1;
                continue;
            };
            let mut cand = State {
                t_cw: state.t_cw.clone(),
                x: state.x.clone(),
            };
            for c in 1..nc {
                let d = Vector6::from_column_slice(&dc.as_slice()[6 * (c - 1)..6 * c]);
                cand.t_cw[c] = (transform_from_twist(&Twist::from_vector(&d)) * cand.t_cw[c]).orthonormalized();
            }
            for l in 0..np {
                cand.x[l] += Vector3::from_column_slice(&dp.as_slice()[3 * l..3 * l + 3]);
            }
            let new_cost = cand.cost(problem, &idx, delta);
            if new_cost.is_finite() && new_cost <= cost {
                let rel = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
                state = cand;
                cost = new_cost;
                damping = (damping / 10.0).max(1e-10);
                accepted = true;
                converged = rel < config.relative_tolerance;
                break;
            }
            damping *= 10.0;
            failures += 1;
        }
        if !accepted || converged {
            break;
        }
    }

    let keyframes = problem
        .keyframes
        .iter()
        .zip(&state.t_cw)
        .map(|(k, t)| Keyframe {
            pose: t.inverse(),
            ..*k
        })
        .collect();
    let landmarks = problem
        .landmarks
        .iter()
        .zip(&state.x)
        .map(|(l, x)| Landmark {
            position: *x,
            ..*l
        })
        .collect();
    Ok(BaResult {
        keyframes,
        landmarks,
        rmse: state.rmse(problem, &idx),
        initial_cost,
        final_cost: cost,
        iterations,
    })
}

fn marquardt(m: &mut DMatrix<f64>, damping: f64) {
    for k in 0..m.nrows() {
        m[(k, k)] += damping * m[(k, k)].max(1e-9);
    }
}

/// Full normal equations over cameras 1.. and all points.
fn solve_dense(lins: &[Lin], nc: usize, np: usize, damping: f64) -> Option<(DVector<f64>, DVector<f64>)> {
    let ncv = 6 * (nc - 1);
    let n = ncv + 3 * np;
    let mut h = DMatrix::<f64>::zeros(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for l in lins {
        let op = ncv + 3 * l.pt;
        let mut hp = h.fixed_view_mut::<3, 3>(op, op);
        hp += l.hpp;
        let mut bp = b.fixed_rows_mut::<3>(op);
        bp += l.bp;
        if l.cam > 0 {
            let oc = 6 * (l.cam - 1);
            let mut hc = h.fixed_view_mut::<6, 6>(oc, oc);
            hc += l.hcc;
            let mut hcp = h.fixed_view_mut::<6, 3>(oc, op);
            hcp += l.hcp;
            let mut hpc = h.fixed_view_mut::<3, 6>(op, oc);
            hpc += l.hcp.transpose();
            let mut bc = b.fixed_rows_mut::<6>(oc);
            bc += l.bc;
        }
    }
    marquardt(&mut h, damping);
    let x = h.cholesky()?.solve(&(-b));
    Some((x.rows(0, ncv).into_owned(), x.rows(ncv, 3 * np).into_owned()))
}

/// Landmark elimination: solve the reduced camera system, then back-substitute points.
fn solve_schur(lins: &[Lin], nc: usize, np: usize, damping: f64) -> Option<(DVector<f64>, DVector<f64>)> {
    let ncv = 6 * (nc - 1);
    let mut u = DMatrix::<f64>::zeros(ncv, ncv);
    let mut bc = DVector::<f64>::zeros(ncv);
    let mut v = vec![Matrix3::<f64>::zeros(); np];
    let mut bp = vec![Vector3::<f64>::zeros(); np];
    // Camera-point coupling blocks grouped by point.
    let mut w: Vec<Vec<(usize, Matrix6x3)>> = vec![Vec::new(); np];
    for l in lins {
        v[l.pt] += l.hpp;
        bp[l.pt] += l.bp;
        if l.cam > 0 {
            let oc = 6 * (l.cam - 1);
            let mut blk = u.fixed_view_mut::<6, 6>(oc, oc);
            blk += l.hcc;
            let mut seg = bc.fixed_rows_mut::<6>(oc);
            seg += l.bc;
            match w[l.pt].iter_mut().find(|(c, _)| *c == l.cam) {
                Some((_, m)) => *m += l.hcp,
                None => w[l.pt].push((l.cam, l.hcp)),
            }
        }
    }
    marquardt(&mut u, damping);
    let mut v_inv = Vec::with_capacity(np);
    for vp in &mut v {
        for k in 0..3 {
            vp[(k, k)] += damping * vp[(k, k)].max(1e-9);
        }
        v_inv.push(vp.try_inverse()?);
    }
    let mut s = u;
    let mut rhs = -bc;
    for p in 0..np {
        let vi = v_inv[p];
        for &(c1, w1) in &w[p] {
            let o1 = 6 * (c1 - 1);
            let w1v = w1 * vi;
            let mut seg = rhs.fixed_rows_mut::<6>(o1);
            seg += w1v * bp[p];
            for &(c2, w2) in &w[p] {
                let o2 = 6 * (c2 - 1);
                let mut blk = s.fixed_view_mut::<6, 6>(o1, o2);
                blk -= w1v * w2.transpose();
            }
        }
    }
    let dc = if ncv > 0 {
        s.cholesky()?.solve(&rhs)
    } else {
        DVector::zeros(0)
    };
    let mut dp = DVector::<f64>::zeros(3 * np);
    for p in 0..np {
        let mut r = -bp[p];
        for &(c, wc) in &w[p] {
            let d = dc.fixed_rows::<6>(6 * (c - 1));
            r -= wc.transpose() * d;
        }
        dp.fixed_rows_mut::<3>(3 * p).copy_from(&(v_inv[p] * r));
    }
    Some((dc, dp))
}

#![allow(dead_code)]

use std::f64::consts::{PI, TAU};

use denseloop::geometry::{CameraIntrinsics, Keyframe};
use denseloop::optimization::{project, BaProblem, Landmark, Observation};
use denseloop::preprocess::voxel_downsample;
use denseloop::{PointCloud, RigidTransform};
use nalgebra::{Matrix3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

pub type Point = Vector3<f64>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const HALF: f64 = 1.2;
/// Surface sampling density (points per square meter).
const DENSITY: f64 = 10_000.0;

fn count(area: f64) -> usize {
    (area * DENSITY).ceil() as usize
}

fn rect(rng: &mut impl Rng, o: Point, u: Point, v: Point, out: &mut Vec<Point>) {
    for _ in 0..count(u.norm() * v.norm()) {
        out.push(o + u * rng.random::<f64>() + v * rng.random::<f64>());
    }
}

/// Box of size `s` resting on `base`, turned by `yaw` about z. Bottom face omitted.
fn yawed_box(rng: &mut impl Rng, base: Point, s: Point, yaw: f64, out: &mut Vec<Point>) {
    let (c, sn) = (yaw.cos(), yaw.sin());
    let ex = Vector3::new(c, sn, 0.0) * s.x;
    let ey = Vector3::new(-sn, c, 0.0) * s.y;
    let ez = Vector3::z() * s.z;
    let o = base - ex / 2.0 - ey / 2.0;
    rect(rng, o + ez, ex, ey, out);
    rect(rng, o, ex, ez, out);
    rect(rng, o + ey, ex, ez, out);
    rect(rng, o, ey, ez, out);
    rect(rng, o + ex, ey, ez, out);
}

fn cylinder(rng: &mut impl Rng, base: Point, r: f64, h: f64, out: &mut Vec<Point>) {
    for _ in 0..count(TAU * r * h) {
        let a = rng.random_range(0.0..TAU);
        out.push(base + Vector3::new(r * a.cos(), r * a.sin(), rng.random_range(0.0..h)));
    }
    for _ in 0..count(PI * r * r) {
        let (a, d) = (rng.random_range(0.0..TAU), r * rng.random::<f64>().sqrt());
        out.push(base + Vector3::new(d * a.cos(), d * a.sin(), h));
    }
}

fn sphere(rng: &mut impl Rng, center: Point, r: f64, out: &mut Vec<Point>) {
    let n = Normal::new(0.0, 1.0).unwrap();
    for _ in 0..count(4.0 * PI * r * r) {
        let d = Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng)).normalize();
        let p = center + d * r;
        if p.z >= 0.0 {
            out.push(p);
        }
    }
}

/// Objects inside `[-1.2, 1.2]^2`, optionally on a floor in front of a wall.
/// Only visible faces are sampled.
pub fn clutter_scene(rng: &mut impl Rng, room: bool) -> Vec<Point> {
    let mut pts = Vec::new();
    if room {
        rect(rng, Vector3::new(-HALF, -HALF, 0.0), Vector3::x() * 2.0 * HALF, Vector3::y() * 2.0 * HALF, &mut pts);
        rect(rng, Vector3::new(-HALF, HALF, 0.0), Vector3::x() * 2.0 * HALF, Vector3::z() * 0.8, &mut pts);
    }
    for _ in 0..10 {
        let base = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..0.9), 0.0);
        match rng.random_range(0..3) {
            0 => {
                let s = Vector3::new(rng.random_range(0.1..0.4), rng.random_range(0.1..0.4), rng.random_range(0.1..0.6));
                let yaw = rng.random_range(0.0..PI);
                yawed_box(rng, base, s, yaw, &mut pts);
            }
            1 => {
                let (r, h) = (rng.random_range(0.05..0.2), rng.random_range(0.1..0.7));
                cylinder(rng, base, r, h, &mut pts);
            }
            _ => {
                let (r, lift) = (rng.random_range(0.08..0.25), rng.random_range(0.3..1.0));
                sphere(rng, base + Vector3::z() * r * lift, r, &mut pts);
            }
        }
    }
    pts
}

/// Points with `x` in `[x0, x1]` plus Gaussian noise, downsampled at `leaf`.
pub fn crop(scene: &[Point], x0: f64, x1: f64, noise: f64, leaf: f64, rng: &mut impl Rng) -> PointCloud {
    let n = Normal::new(0.0, noise).unwrap();
    let pts = scene
        .iter()
        .filter(|p| p.x >= x0 && p.x <= x1)
        .map(|p| p + Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng)))
        .collect();
    voxel_downsample(&PointCloud::new(pts), leaf).unwrap()
}

/// Rotation up to `max_angle` about a random axis, translation up to `max_t`.
pub fn random_transform(rng: &mut impl Rng, max_angle: f64, max_t: f64) -> RigidTransform {
    let n = Normal::new(0.0, 1.0).unwrap();
    let axis = Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng));
    let dir = Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng)).normalize();
    RigidTransform::from_axis_angle(&axis, rng.random_range(0.0..max_angle), dir * rng.random_range(0.0..max_t))
}

/// Clouds are expressed relative to a viewpoint in front of and above the
/// scene, the way fragments sit in their anchor camera frame.
fn viewer() -> RigidTransform {
    RigidTransform::from_translation(-Vector3::new(0.0, -1.5, 1.0))
}

/// Overlapping fragment pair `(P, Q, T)` with `T P ~ Q`; 80% of the scene
/// width is shared.
pub fn overlapping_pair(seed: u64) -> (PointCloud, PointCloud, RigidTransform) {
    let mut r = rng(seed);
    let scene = clutter_scene(&mut r, true);
    let q = crop(&scene, -HALF, 0.8, 0.005, 0.05, &mut r).transformed(&viewer());
    let b = crop(&scene, -0.8, HALF, 0.005, 0.05, &mut r).transformed(&viewer());
    let t = random_transform(&mut r, 60f64.to_radians(), 1.0);
    (b.transformed(&t.inverse()), q, t)
}

/// Pair cut from two independent object scenes with no shared floor or wall.
pub fn disjoint_pair(seed: u64) -> (PointCloud, PointCloud) {
    let mut r = rng(seed);
    let a = clutter_scene(&mut r, false);
    let b = clutter_scene(&mut r, false);
    let p = crop(&a, -0.8, HALF, 0.005, 0.05, &mut r).transformed(&viewer());
    let q = crop(&b, -HALF, 0.8, 0.005, 0.05, &mut r).transformed(&viewer());
    let t = random_transform(&mut r, 60f64.to_radians(), 1.0);
    (p.transformed(&t), q)
}

pub fn brute_nn(points: &[Point], q: &Point) -> Option<(usize, f64)> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| (i, (p - q).norm()))
        .fold(None, |best, (i, d)| match best {
            Some((_, bd)) if bd <= d => best,
            _ => Some((i, d)),
        })
}

pub fn as_point3(p: &Point) -> Point3<f64> {
    Point3::from(*p)
}

fn look_at(eye: Point, target: Point) -> RigidTransform {
    let z = (target - eye).normalize();
    let x = Vector3::z().cross(&z).normalize();
    let y = z.cross(&x);
    RigidTransform::new(Matrix3::from_columns(&[x, y, z]), eye).unwrap()
}

/// Ten cameras on an arc around 200 points in `[-1, 1]^3`. Cameras after the
/// first are perturbed by 0.01 rad / 0.05 m; pixels carry Gaussian `noise`.
/// Returns the problem and the true keyframes.
pub fn ba_scene(rng: &mut impl Rng, noise: f64) -> (BaProblem, Vec<Keyframe>) {
    let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
    let truth_pts: Vec<Point> = (0..200)
        .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    let truth_kf: Vec<Keyframe> = (0..10)
        .map(|c| {
            let a = -0.6 + 1.2 * c as f64 / 9.0;
            let eye = Vector3::new(5.0 * a.sin(), -5.0 * a.cos(), 0.5 + 0.1 * c as f64);
            Keyframe {
                id: c,
                timestamp: c as f64,
                pose: look_at(eye, Vector3::zeros()),
            }
        })
        .collect();
    let gauss = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).unwrap();
    let mut observations = Vec::new();
    for kf in &truth_kf {
        for (p, x) in truth_pts.iter().enumerate() {
            if let Some(px) = project(&k, &kf.pose.inverse(), x) {
                let jitter = if noise > 0.0 { nalgebra::Vector2::new(gauss.sample(rng), gauss.sample(rng)) } else { nalgebra::Vector2::zeros() };
                observations.push(Observation {
                    keyframe: kf.id,
                    landmark: p,
                    pixel: px + jitter,
                    scale_sigma: 1.0 + (p % 3) as f64 * 0.2,
                });
            }
        }
    }
    let keyframes = truth_kf
        .iter()
        .map(|kf| {
            let mut kf = *kf;
            if kf.id > 0 {
                let axis = Vector3::from(rng.sample::<[f64; 3], _>(UnitSphere));
                let dir = Vector3::from(rng.sample::<[f64; 3], _>(UnitSphere));
                kf.pose = RigidTransform::from_axis_angle(&axis, 0.01, dir * 0.05) * kf.pose;
            }
            kf
        })
        .collect();
    let problem = BaProblem {
        intrinsics: k,
        keyframes,
        landmarks: truth_pts.iter().enumerate().map(|(id, &position)| Landmark { id, position }).collect(),
        observations,
    };
    (problem, truth_kf)
}

/// Similarity `(s, R, t)` minimizing `sum |s R a + t - b|^2`.
pub fn umeyama(a: &[Point], b: &[Point]) -> (f64, Matrix3<f64>, Vector3<f64>) {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<Point>() / n, b.iter().sum::<Point>() / n);
    let cov = a.iter().zip(b).fold(Matrix3::zeros(), |c, (x, y)| c + (y - mb) * (x - ma).transpose()) / n;
    let var = a.iter().map(|x| (x - ma).norm_squared()).sum::<f64>() / n;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rot = u * s * vt;
    let scale = svd.singular_values.component_mul(&s.diagonal()).sum() / var;
    (scale, rot, mb - scale * rot * ma)
}

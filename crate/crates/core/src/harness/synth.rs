//! Synthetic room scenes: a triangle-soup room with furniture boxes, a loopy
//! camera path, ray-cast depth clouds, drifted odometry, a surfel map and a
//! landmark problem, with ground truth for all of it.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use rustc_hash::FxHashMap;

use super::config::{assign, unknown_key, FlatConfig};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Keyframe, Point, PointCloud, RigidTransform, Surfel};
use crate::map_correction::SurfelMap;
use crate::optimization::{BaProblem, Landmark, Observation};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathShape {
    Circle,
    Square,
}

impl FromStr for PathShape {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "circle" => Ok(Self::Circle),
            "square" => Ok(Self::Square),
            _ => Err(format!("unknown path `{s}`")),
        }
    }
}

impl fmt::Display for PathShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Circle => "circle",
            Self::Square => "square",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub frames: usize,
    pub fps: f64,
    pub path: PathShape,
    /// Half-size of the square, or radius of the circle (m).
    pub path_radius: f64,
    pub revolutions: f64,
    pub camera_height: f64,
    /// Downward camera tilt (degrees).
    pub pitch_deg: f64,
    pub room_x: f64,
    pub room_y: f64,
    pub room_z: f64,
    pub boxes: usize,
    pub shelves: usize,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    /// Pixel step between sampled depth rays.
    pub pixel_stride: usize,
    pub max_depth: f64,
    /// Gaussian depth noise (m).
    pub depth_noise: f64,
    /// Constant odometry yaw bias (rad/frame).
    pub yaw_drift: f64,
    /// Constant odometry forward bias (m/frame).
    pub translation_drift: f64,
    pub odometry_rotation_noise: f64,
    pub odometry_translation_noise: f64,
    pub keyframe_every: usize,
    pub landmarks: usize,
    /// Pixel noise in units of each observation's scale sigma.
    pub pixel_noise: f64,
    pub surfel_leaf: f64,
    pub truth_spacing: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 400,
            fps: 30.0,
            path: PathShape::Square,
            path_radius: 1.0,
            revolutions: 1.25,
            camera_height: 1.4,
            pitch_deg: 15.0,
            room_x: 6.0,
            room_y: 5.0,
            room_z: 2.6,
            boxes: 14,
            shelves: 10,
            width: 640,
            height: 480,
            fx: 520.0,
            fy: 520.0,
            pixel_stride: 8,
            max_depth: 8.0,
            depth_noise: 0.005,
            yaw_drift: 0.0004,
            translation_drift: 0.0,
            odometry_rotation_noise: 0.0002,
            odometry_translation_noise: 0.001,
            keyframe_every: 10,
            landmarks: 1000,
            pixel_noise: 0.5,
            surfel_leaf: 0.04,
            truth_spacing: 0.02,
        }
    }
}

impl SynthConfig {
    /// Same scene without sensor noise or odometry error.
    pub fn noise_free(mut self) -> Self {
        self.depth_noise = 0.0;
        self.yaw_drift = 0.0;
        self.translation_drift = 0.0;
        self.odometry_rotation_noise = 0.0;
        self.odometry_translation_noise = 0.0;
        self.pixel_noise = 0.0;
        self
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
            width: self.width,
            height: self.height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.frames < 2 {
            return bad("frames must be >= 2");
        }
        if self.keyframe_every == 0 || self.pixel_stride == 0 {
            return bad("keyframe_every and pixel_stride must be >= 1");
        }
        let positive = [
            self.fps,
            self.path_radius,
            self.room_x,
            self.room_y,
            self.room_z,
            self.max_depth,
            self.surfel_leaf,
            self.truth_spacing,
        ];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return bad("sizes, rates and resolutions must be positive");
        }
        let non_negative = [
            self.depth_noise,
            self.odometry_rotation_noise,
            self.odometry_translation_noise,
            self.pixel_noise,
            self.revolutions,
        ];
        if non_negative.iter().any(|v| !(*v >= 0.0)) {
            return bad("noise levels must be >= 0");
        }
        if !(self.path_radius * std::f64::consts::SQRT_2 + 0.3 < 0.5 * self.room_x.min(self.room_y)) {
            return bad("camera path does not fit in the room");
        }
        if !(0.0 < self.camera_height && self.camera_height < self.room_z) {
            return bad("camera height must be inside the room");
        }
        self.intrinsics().validate()
    }

    pub fn from_flat(c: &FlatConfig) -> Result<Self> {
        let mut s = Self::default();
        for (key, value, line) in &c.entries {
            let (v, l) = (value.as_str(), *line);
            match key.as_str() {
                "seed" => assign(&mut s.seed, key, v, l)?,
                "frames" => assign(&mut s.frames, key, v, l)?,
                "fps" => assign(&mut s.fps, key, v, l)?,
                "path" => assign(&mut s.path, key, v, l)?,
                "path_radius" => assign(&mut s.path_radius, key, v, l)?,
                "revolutions" => assign(&mut s.revolutions, key, v, l)?,
                "camera_height" => assign(&mut s.camera_height, key, v, l)?,
                "pitch_deg" => assign(&mut s.pitch_deg, key, v, l)?,
                "room_x" => assign(&mut s.room_x, key, v, l)?,
                "room_y" => assign(&mut s.room_y, key, v, l)?,
                "room_z" => assign(&mut s.room_z, key, v, l)?,
                "boxes" => assign(&mut s.boxes, key, v, l)?,
                "shelves" => assign(&mut s.shelves, key, v, l)?,
                "width" => assign(&mut s.width, key, v, l)?,
                "height" => assign(&mut s.height, key, v, l)?,
                "fx" => assign(&mut s.fx, key, v, l)?,
                "fy" => assign(&mut s.fy, key, v, l)?,
                "pixel_stride" => assign(&mut s.pixel_stride, key, v, l)?,
                "max_depth" => assign(&mut s.max_depth, key, v, l)?,
                "depth_noise" => assign(&mut s.depth_noise, key, v, l)?,
                "yaw_drift" => assign(&mut s.yaw_drift, key, v, l)?,
                "translation_drift" => assign(&mut s.translation_drift, key, v, l)?,
                "odometry_rotation_noise" => assign(&mut s.odometry_rotation_noise, key, v, l)?,
                "odometry_translation_noise" => assign(&mut s.odometry_translation_noise, key, v, l)?,
                "keyframe_every" => assign(&mut s.keyframe_every, key, v, l)?,
                "landmarks" => assign(&mut s.landmarks, key, v, l)?,
                "pixel_noise" => assign(&mut s.pixel_noise, key, v, l)?,
                "surfel_leaf" => assign(&mut s.surfel_leaf, key, v, l)?,
                "truth_spacing" => assign(&mut s.truth_spacing, key, v, l)?,
                _ => return Err(unknown_key(key, l)),
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn to_flat(&self) -> FlatConfig {
        let mut c = FlatConfig::default();
        c.push("seed", self.seed);
        c.push("frames", self.frames);
        c.push("fps", self.fps);
        c.push("path", self.path);
        c.push("path_radius", self.path_radius);
        c.push("revolutions", self.revolutions);
        c.push("camera_height", self.camera_height);
        c.push("pitch_deg", self.pitch_deg);
        c.push("room_x", self.room_x);
        c.push("room_y", self.room_y);
        c.push("room_z", self.room_z);
        c.push("boxes", self.boxes);
        c.push("shelves", self.shelves);
        c.push("width", self.width);
        c.push("height", self.height);
        c.push("fx", self.fx);
        c.push("fy", self.fy);
        c.push("pixel_stride", self.pixel_stride);
        c.push("max_depth", self.max_depth);
        c.push("depth_noise", self.depth_noise);
        c.push("yaw_drift", self.yaw_drift);
        c.push("translation_drift", self.translation_drift);
        c.push("odometry_rotation_noise", self.odometry_rotation_noise);
        c.push("odometry_translation_noise", self.odometry_translation_noise);
        c.push("keyframe_every", self.keyframe_every);
        c.push("landmarks", self.landmarks);
        c.push("pixel_noise", self.pixel_noise);
        c.push("surfel_leaf", self.surfel_leaf);
        c.push("truth_spacing", self.truth_spacing);
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangle {
    pub a: Point,
    pub b: Point,
    pub c: Point,
}

impl Triangle {
    pub fn normal(&self) -> Vector3<f64> {
        (self.b - self.a).cross(&(self.c - self.a)).normalize()
    }

    /// Ray parameter of the two-sided intersection with `o + t d`, `t > 0`.
    fn intersect(&self, o: &Point, d: &Vector3<f64>) -> Option<f64> {
        let e1 = self.b - self.a;
        let e2 = self.c - self.a;
        let p = d.cross(&e2);
        let det = e1.dot(&p);
        if det.abs() < 1e-12 {
            return None;
        }
        let inv = 1.0 / det;
        let s = o - self.a;
        let u = s.dot(&p) * inv;
        if !(0.0..=1.0).contains(&u) {
            return None;
        }
        let q = s.cross(&e1);
        let v = d.dot(&q) * inv;
        if v < 0.0 || u + v > 1.0 {
            return None;
        }
        let t = e2.dot(&q) * inv;
        (t > 1e-9).then_some(t)
    }
}

/// Triangle soup grouped by axis-aligned bounds for ray casting.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub triangles: Vec<Triangle>,
    groups: Vec<(Point, Point, std::ops::Range<usize>)>,
}

impl Mesh {
    /// Adds the 12 triangles of an axis-aligned box.
    pub fn push_box(&mut self, lo: Point, hi: Point) {
        let start = self.triangles.len();
        let v = |x: bool, y: bool, z: bool| {
            Vector3::new(if x { hi.x } else { lo.x }, if y { hi.y } else { lo.y }, if z { hi.z } else { lo.z })
        };
        let faces = [
            [v(false, false, false), v(false, true, false), v(true, true, false), v(true, false, false)],
            [v(false, false, true), v(true, false, true), v(true, true, true), v(false, true, true)],
            [v(false, false, false), v(true, false, false), v(true, false, true), v(false, false, true)],
            [v(false, true, false), v(false, true, true), v(true, true, true), v(true, true, false)],
            [v(false, false, false), v(false, false, true), v(false, true, true), v(false, true, false)],
            [v(true, false, false), v(true, true, false), v(true, true, true), v(true, false, true)],
        ];
        for f in faces {
            self.triangles.push(Triangle { a: f[0], b: f[1], c: f[2] });
            self.triangles.push(Triangle { a: f[0], b: f[2], c: f[3] });
        }
        self.groups.push((lo, hi, start..self.triangles.len()));
    }

    /// Nearest hit of `o + t d`: `(t, triangle index)`.
    pub fn cast(&self, o: &Point, d: &Vector3<f64>) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (lo, hi, range) in &self.groups {
            let Some(t_box) = slab(o, d, lo, hi) else { continue };
            if best.is_some_and(|(t, _)| t_box > t) {
                continue;
            }
            for k in range.clone() {
                if let Some(t) = self.triangles[k].intersect(o, d) {
                    if best.is_none_or(|(b, _)| t < b) {
                        best = Some((t, k));
                    }
                }
            }
        }
        best
    }

    /// Points on every triangle at roughly `spacing` resolution.
    pub fn sample_surface(&self, spacing: f64) -> PointCloud {
        let mut pts = Vec::new();
        for tri in &self.triangles {
            let e1 = tri.b - tri.a;
            let e2 = tri.c - tri.a;
            let n = ((e1.norm().max(e2.norm()).max((tri.c - tri.b).norm()) / spacing).ceil() as usize).max(1);
            for i in 0..=n {
                for j in 0..=n - i {
                    pts.push(tri.a + e1 * (i as f64 / n as f64) + e2 * (j as f64 / n as f64));
                }
            }
        }
        PointCloud::new(pts)
    }
}

/// Entry parameter of a ray into a box, if it hits.
fn slab(o: &Point, d: &Vector3<f64>, lo: &Point, hi: &Point) -> Option<f64> {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        let inv = 1.0 / d[a];
        let (mut near, mut far) = ((lo[a] - o[a]) * inv, (hi[a] - o[a]) * inv);
        if near > far {
            std::mem::swap(&mut near, &mut far);
        }
        // 1e-9 slack keeps rays grazing a face inside.
        t0 = t0.max(near - 1e-9);
        t1 = t1.min(far + 1e-9);
        if t0 > t1 {
            return None;
        }
    }
    Some(t0)
}

/// Everything [`synth_scene`] produces.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub config: SynthConfig,
    pub intrinsics: CameraIntrinsics,
    pub mesh: Mesh,
    pub timestamps: Vec<f64>,
    /// Ground-truth camera-to-world poses per frame.
    pub truth: Vec<RigidTransform>,
    /// Drifted odometry poses per frame.
    pub odometry: Vec<RigidTransform>,
    /// Per-frame depth clouds in camera coordinates.
    pub clouds: Vec<PointCloud>,
    /// Frame index of each keyframe.
    pub keyframe_frames: Vec<usize>,
    /// Keyframes at odometry poses.
    pub keyframes: Vec<Keyframe>,
    /// Surfels fused at odometry poses.
    pub surfels: SurfelMap,
    /// Landmark problem at odometry poses.
    pub ba: BaProblem,
    pub truth_landmarks: Vec<Point>,
    /// Dense samples of the true surfaces.
    pub truth_surface: PointCloud,
}

impl SynthScene {
    pub fn truth_keyframes(&self) -> Vec<Keyframe> {
        self.keyframes
            .iter()
            .zip(&self.keyframe_frames)
            .map(|(k, &f)| Keyframe { pose: self.truth[f], ..*k })
            .collect()
    }
}

fn room_mesh(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Mesh {
    let (hx, hy, hz) = (cfg.room_x / 2.0, cfg.room_y / 2.0, cfg.room_z);
    let mut mesh = Mesh::default();
    mesh.push_box(Vector3::new(-hx, -hy, 0.0), Vector3::new(hx, hy, hz));
    let keep_out = cfg.path_radius * std::f64::consts::SQRT_2 + 0.3;
    let mut placed = 0;
    let mut attempts = 0;
    while placed < cfg.boxes && attempts < 100 * (cfg.boxes + 1) {
        attempts += 1;
        let sx = rng.random_range(0.3..1.0);
        let sy = rng.random_range(0.3..1.0);
        let sz = rng.random_range(0.3..1.8);
        let x = rng.random_range(-hx + sx / 2.0..hx - sx / 2.0);
        let y = rng.random_range(-hy + sy / 2.0..hy - sy / 2.0);
        if (x.abs() - sx / 2.0).max(y.abs() - sy / 2.0) < keep_out {
            continue;
        }
        mesh.push_box(Vector3::new(x - sx / 2.0, y - sy / 2.0, 0.0), Vector3::new(x + sx / 2.0, y + sy / 2.0, sz));
        placed += 1;
    }
    for _ in 0..cfg.shelves {
        let w = rng.random_range(0.2..0.8);
        let d = rng.random_range(0.1..0.3);
        let h = rng.random_range(0.05..0.4);
        let z = rng.random_range(0.6..(hz - 0.5).max(0.7));
        let wall = rng.random_range(0..4);
        let (lo, hi) = match wall {
            0 | 1 => {
                let x = rng.random_range(-hx + w..hx - w);
                let y = if wall == 0 { -hy } else { hy - d };
                (Vector3::new(x - w / 2.0, y, z), Vector3::new(x + w / 2.0, y + d, z + h))
            }
            _ => {
                let y = rng.random_range(-hy + w..hy - w);
                let x = if wall == 2 { -hx } else { hx - d };
                (Vector3::new(x, y - w / 2.0, z), Vector3::new(x + d, y + w / 2.0, z + h))
            }
        };
        mesh.push_box(lo, hi);
    }
    mesh
}

/// Camera-to-world pose at path parameter `s` (revolutions): on the path,
/// looking outward and tilted down.
fn path_pose(cfg: &SynthConfig, s: f64) -> RigidTransform {
    let phi = std::f64::consts::TAU * s;
    let (c, sn) = (phi.cos(), phi.sin());
    let scale = match cfg.path {
        PathShape::Circle => cfg.path_radius,
        PathShape::Square => cfg.path_radius / c.abs().max(sn.abs()),
    };
    let center = Vector3::new(c * scale, sn * scale, cfg.camera_height);
    let pitch = cfg.pitch_deg.to_radians();
    let forward = Vector3::new(c * pitch.cos(), sn * pitch.cos(), -pitch.sin());
    let right = forward.cross(&Vector3::z()).normalize();
    let down = forward.cross(&right);
    RigidTransform {
        rotation: Matrix3::from_columns(&[right, down, forward]),
        translation: center,
    }
}

fn frame_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma is validated non-negative")
}

/// Depth points (camera frame) and true world normals of one frame.
fn render(cfg: &SynthConfig, mesh: &Mesh, pose: &RigidTransform, rng: &mut ChaCha8Rng) -> (Vec<Point>, Vec<Vector3<f64>>) {
    let k = cfg.intrinsics();
    let noise = gaussian(cfg.depth_noise);
    let mut pts = Vec::new();
    let mut normals = Vec::new();
    for v in (0..cfg.height as usize).step_by(cfg.pixel_stride) {
        for u in (0..cfg.width as usize).step_by(cfg.pixel_stride) {
            let dc = k.back_project(u as f64, v as f64);
            let dw = pose.rotation * dc;
            let Some((t, tri)) = mesh.cast(&pose.translation, &dw) else { continue };
            if t > cfg.max_depth {
                continue;
            }
            let depth = t + noise.sample(rng);
            if depth <= 0.0 {
                continue;
            }
            let mut n = mesh.triangles[tri].normal();
            if n.dot(&dw) > 0.0 {
                n = -n;
            }
            pts.push(dc * depth);
            normals.push(n);
        }
    }
    (pts, normals)
}

fn odometry(cfg: &SynthConfig, truth: &[RigidTransform]) -> Vec<RigidTransform> {
    let mut rng = frame_rng(cfg.seed, 1 << 40);
    let rot = gaussian(cfg.odometry_rotation_noise);
    let trans = gaussian(cfg.odometry_translation_noise);
    let mut out = vec![truth[0]];
    for k in 1..truth.len() {
        let rel = truth[k - 1].inverse() * truth[k];
        // World vertical seen from the camera.
        let up = truth[k].rotation.transpose() * Vector3::z();
        let yaw = RigidTransform::from_axis_angle(&up, cfg.yaw_drift, Vector3::new(0.0, 0.0, cfg.translation_drift));
        let w = Vector3::new(rot.sample(&mut rng), rot.sample(&mut rng), rot.sample(&mut rng));
        let t = Vector3::new(trans.sample(&mut rng), trans.sample(&mut rng), trans.sample(&mut rng));
        let noise = if w.norm() > 0.0 {
            RigidTransform::from_axis_angle(&w, w.norm(), t)
        } else {
            RigidTransform::from_translation(t)
        };
        let next = out[k - 1] * rel * yaw * noise;
        out.push(next.orthonormalized());
    }
    out
}

/// Generates a complete synthetic sequence. Identical configs give
/// bitwise-identical scenes.
pub fn synth_scene(cfg: &SynthConfig) -> Result<SynthScene> {
    cfg.validate()?;
    let mut rng = frame_rng(cfg.seed, 0);
    let mesh = room_mesh(cfg, &mut rng);
    let n = cfg.frames;
    let timestamps: Vec<f64> = (0..n).map(|k| k as f64 / cfg.fps).collect();
    let truth: Vec<RigidTransform> = (0..n)
        .map(|k| path_pose(cfg, cfg.revolutions * k as f64 / (n - 1) as f64))
        .collect();
    let odometry = odometry(cfg, &truth);

    let rendered: Vec<(Vec<Point>, Vec<Vector3<f64>>)> = truth
        .par_iter()
        .enumerate()
        .map(|(k, pose)| render(cfg, &mesh, pose, &mut frame_rng(cfg.seed, 1 + k as u64)))
        .collect();
    let keyframe_frames: Vec<usize> = (0..n).step_by(cfg.keyframe_every).collect();
    let keyframes: Vec<Keyframe> = keyframe_frames
        .iter()
        .enumerate()
        .map(|(id, &f)| Keyframe {
            id,
            timestamp: timestamps[f],
            pose: odometry[f],
        })
        .collect();

    let surfels = fuse_surfels(cfg, &rendered, &truth, &odometry, &keyframes, &keyframe_frames);
    let (ba, truth_landmarks) = landmark_problem(cfg, &mesh, &truth, &odometry, &keyframes, &keyframe_frames, &mut rng);
    let truth_surface = mesh.sample_surface(cfg.truth_spacing);
    let clouds = rendered.into_iter().map(|(p, _)| PointCloud::new(p)).collect();

    Ok(SynthScene {
        config: cfg.clone(),
        intrinsics: cfg.intrinsics(),
        mesh,
        timestamps,
        truth,
        odometry,
        clouds,
        keyframe_frames,
        keyframes,
        surfels,
        ba,
        truth_landmarks,
        truth_surface,
    })
}

/// Voxel-fuses keyframe depth at odometry poses: one surfel per voxel, first
/// observation wins, window spans the first to last observing keyframe.
fn fuse_surfels(
    cfg: &SynthConfig,
    rendered: &[(Vec<Point>, Vec<Vector3<f64>>)],
    truth: &[RigidTransform],
    odometry: &[RigidTransform],
    keyframes: &[Keyframe],
    keyframe_frames: &[usize],
) -> SurfelMap {
    let mut index: FxHashMap<[i64; 3], usize> = FxHashMap::default();
    let mut map = SurfelMap::default();
    for (kf, &f) in keyframes.iter().zip(keyframe_frames) {
        let (pts, normals) = &rendered[f];
        let pose = &odometry[f];
        let to_drifted = pose.rotation * truth[f].rotation.transpose();
        for (p, n) in pts.iter().zip(normals) {
            let w = pose.apply(p);
            let key = [0, 1, 2].map(|a| (w[a] / cfg.surfel_leaf).floor() as i64);
            match index.get(&key) {
                Some(&s) => {
                    let surfel = &mut map.surfels[s];
                    surfel.tu = kf.timestamp;
                    surfel.confidence += 1.0;
                    if map.visibility[s].last() != Some(&kf.id) {
                        map.visibility[s].push(kf.id);
                    }
                }
                None => {
                    index.insert(key, map.surfels.len());
                    map.surfels.push(Surfel {
                        position: w,
                        normal: (to_drifted * n).normalize(),
                        radius: cfg.surfel_leaf / 2.0,
                        confidence: 1.0,
                        t0: kf.timestamp,
                        tu: kf.timestamp,
                    });
                    map.visibility.push(vec![kf.id]);
                }
            }
        }
    }
    map
}

fn landmark_problem(
    cfg: &SynthConfig,
    mesh: &Mesh,
    truth: &[RigidTransform],
    odometry: &[RigidTransform],
    keyframes: &[Keyframe],
    keyframe_frames: &[usize],
    rng: &mut ChaCha8Rng,
) -> (BaProblem, Vec<Point>) {
    let k = cfg.intrinsics();
    let pixel = gaussian(cfg.pixel_noise);
    let true_kf: Vec<RigidTransform> = keyframe_frames.iter().map(|&f| truth[f]).collect();
    let mut landmarks = Vec::new();
    let mut observations = Vec::new();
    let mut truth_points = Vec::new();
    let mut attempts = 0;
    while truth_points.len() < cfg.landmarks && attempts < 20 * (cfg.landmarks + 1) {
        attempts += 1;
        let r = rng.random_range(0..keyframes.len());
        let u = rng.random_range(0.0..cfg.width as f64 - 1.0);
        let v = rng.random_range(0.0..cfg.height as f64 - 1.0);
        let d = true_kf[r].rotation * k.back_project(u, v);
        let Some((t, _)) = mesh.cast(&true_kf[r].translation, &d) else { continue };
        if t > cfg.max_depth {
            continue;
        }
        let x = true_kf[r].translation + d * t;
        let mut obs = Vec::new();
        for (c, pose) in true_kf.iter().enumerate() {
            let pc = pose.inverse().apply(&x);
            let Some(px) = k.project_camera(&pc) else { continue };
            if !k.contains(&px) || pc.z > cfg.max_depth {
                continue;
            }
            let ray = x - pose.translation;
            if mesh.cast(&pose.translation, &ray).is_some_and(|(h, _)| h < 1.0 - 1e-6) {
                continue;
            }
            obs.push((c, px));
        }
        if obs.len() < 2 {
            continue;
        }
        let id = truth_points.len();
        let first = obs[0].0;
        let init = odometry[keyframe_frames[first]] * true_kf[first].inverse();
        for (c, px) in obs {
            let sigma = 1.2f64.powi(rng.random_range(0..4));
            let noisy = px + Vector2::new(pixel.sample(rng), pixel.sample(rng)) * sigma;
            observations.push(Observation {
                keyframe: keyframes[c].id,
                landmark: id,
                pixel: noisy,
                scale_sigma: sigma,
            });
        }
        landmarks.push(Landmark {
            id,
            position: init.apply(&x),
        });
        truth_points.push(x);
    }
    let problem = BaProblem {
        intrinsics: k,
        keyframes: keyframes.to_vec(),
        landmarks,
        observations,
    };
    (problem, truth_points)
}

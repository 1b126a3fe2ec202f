//! Geometric domain types and the SE(3) operations shared by every stage.
//!
//! Poses are stored as a rotation matrix plus a translation vector. The
//! 6-vector [`Twist`] uses XYZ Euler angles `(alpha, beta, gamma)` followed by
//! the translation `(x, y, z)`, so that `R = Rx(alpha) * Ry(beta) * Rz(gamma)`.

use std::f64::consts::FRAC_PI_2;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = Vector3<f64>;

/// Drift of `R^T R` from identity that triggers re-orthonormalization.
const ORTHONORMAL_DRIFT: f64 = 1e-9;

/// Positions plus optional unit normals.
///
/// A zero normal marks a point whose normal could not be estimated; such
/// points are skipped by feature computation and never count as inliers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Point>,
    pub normals: Option<Vec<Vector3<f64>>>,
}

impl PointCloud {
    pub fn new(positions: Vec<Point>) -> Self {
        Self {
            positions,
            normals: None,
        }
    }

    pub fn with_normals(positions: Vec<Point>, normals: Vec<Vector3<f64>>) -> Result<Self> {
        if positions.len() != normals.len() {
            return Err(Error::InvalidArgument(format!(
                "{} positions but {} normals",
                positions.len(),
                normals.len()
            )));
        }
        Ok(Self {
            positions,
            normals: Some(normals),
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn has_normals(&self) -> bool {
        self.normals.is_some()
    }

    /// True when point `i` carries a usable (non-marker) normal.
    pub fn has_valid_normal(&self, i: usize) -> bool {
        self.normals
            .as_ref()
            .is_some_and(|n| n[i].norm_squared() > 0.5)
    }

    pub fn centroid(&self) -> Option<Point> {
        if self.positions.is_empty() {
            return None;
        }
        let sum = self
            .positions
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p);
        Some(sum / self.positions.len() as f64)
    }

    /// Applies `t` to positions and rotates normals (markers stay zero).
    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        PointCloud {
            positions: self.positions.iter().map(|p| t.apply(p)).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| ns.iter().map(|n| t.rotation * n).collect()),
        }
    }

    /// Concatenates clouds. Normals survive only if every input has them.
    pub fn concat<'a>(clouds: impl IntoIterator<Item = &'a PointCloud>) -> PointCloud {
        let mut positions = Vec::new();
        let mut normals = Some(Vec::new());
        for c in clouds {
            positions.extend_from_slice(&c.positions);
            match (&mut normals, &c.normals) {
                (Some(acc), Some(n)) => acc.extend_from_slice(n),
                _ => normals = None,
            }
        }
        PointCloud { positions, normals }
    }

    /// Checks the length, finiteness and unit-normal invariants.
    pub fn validate(&self) -> Result<()> {
        if let Some(ns) = &self.normals {
            if ns.len() != self.positions.len() {
                return Err(Error::InvalidArgument("normal count mismatch".into()));
            }
            for n in ns {
                let len = n.norm();
                if len != 0.0 && (len - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidArgument(format!("normal of length {len}")));
                }
            }
        }
        if self
            .positions
            .iter()
            .any(|p| !p.iter().all(|v| v.is_finite()))
        {
            return Err(Error::InvalidArgument("non-finite coordinate".into()));
        }
        Ok(())
    }
}

/// Rigid body transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[[f64; 4]; 4]", try_from = "[[f64; 4]; 4]")]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform, rejecting rotations that are not proper orthonormal.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        if !t.is_valid(1e-9) {
            return Err(Error::InvalidArgument(
                "rotation is not orthonormal with det +1".into(),
            ));
        }
        Ok(t)
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn from_rotation(rotation: Matrix3<f64>) -> Self {
        Self {
            rotation,
            translation: Vector3::zeros(),
        }
    }

    /// Rotation about `axis` (normalized internally) by `angle` radians.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let axis = nalgebra::Unit::new_normalize(*axis);
        Self {
            rotation: *Rotation3::from_axis_angle(&axis, angle).matrix(),
            translation,
        }
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::z(), angle, Vector3::zeros())
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: *q.to_rotation_matrix().matrix(),
            translation,
        }
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        let det = self.rotation.determinant();
        ortho <= tol
            && (det - 1.0).abs() <= tol
            && self.translation.iter().all(|v| v.is_finite())
    }

    pub fn apply(&self, p: &Point) -> Point {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix4(m: &Matrix4<f64>) -> Result<Self> {
        let last = m.row(3);
        if (last[0].abs() + last[1].abs() + last[2].abs() + (last[3] - 1.0).abs()) > 1e-6 {
            return Err(Error::InvalidArgument(
                "last row of a rigid transform must be 0 0 0 1".into(),
            ));
        }
        let rotation = m.fixed_view::<3, 3>(0, 0).into_owned();
        let translation = m.fixed_view::<3, 1>(0, 3).into_owned();
        let t = Self {
            rotation,
            translation,
        };
        if !t.is_valid(1e-6) {
            return Err(Error::InvalidArgument(
                "rotation block is not orthonormal with det +1".into(),
            ));
        }
        Ok(t.orthonormalized())
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_matrix4();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(v: &[f64; 16]) -> Result<Self> {
        Self::from_matrix4(&Matrix4::from_row_slice(v))
    }

    /// Projects the rotation block back onto SO(3) when it drifted.
    pub fn orthonormalized(mut self) -> Self {
        let drift = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        if drift > ORTHONORMAL_DRIFT {
            self.rotation = nearest_rotation(&self.rotation);
        }
        self
    }

    pub fn camera_center(&self) -> Point {
        self.translation
    }
}

impl From<RigidTransform> for [[f64; 4]; 4] {
    fn from(t: RigidTransform) -> Self {
        let m = t.to_matrix4();
        let mut rows = [[0.0; 4]; 4];
        for (r, row) in rows.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = m[(r, c)];
            }
        }
        rows
    }
}

impl TryFrom<[[f64; 4]; 4]> for RigidTransform {
    type Error = Error;

    fn try_from(rows: [[f64; 4]; 4]) -> Result<Self> {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        RigidTransform::from_matrix4(&Matrix4::from_row_slice(&flat))
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        compose(&self, &rhs)
    }
}

impl Mul for &RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: &RigidTransform) -> RigidTransform {
        compose(self, rhs)
    }
}

/// `a * b`: applies `b` first, then `a`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    RigidTransform {
        rotation: a.rotation * b.rotation,
        translation: a.rotation * b.translation + a.translation,
    }
    .orthonormalized()
}

fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut d = Matrix3::identity();
        d[(2, 2)] = -1.0;
        r = u * d * v_t;
    }
    r
}

/// Six-parameter pose: XYZ Euler angles (radians) then translation (meters).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Twist {
    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            alpha: v[0],
            beta: v[1],
            gamma: v[2],
            x: v[3],
            y: v[4],
            z: v[5],
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.alpha, self.beta, self.gamma, self.x, self.y, self.z)
    }
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(b: f64) -> Matrix3<f64> {
    let (s, c) = b.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(g: f64) -> Matrix3<f64> {
    let (s, c) = g.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Exact map from a twist: rotation `Rx(alpha) Ry(beta) Rz(gamma)`, translation `(x, y, z)`.
pub fn transform_from_twist(xi: &Twist) -> RigidTransform {
    RigidTransform {
        rotation: rot_x(xi.alpha) * rot_y(xi.beta) * rot_z(xi.gamma),
        translation: Vector3::new(xi.x, xi.y, xi.z),
    }
}

/// Inverse of [`transform_from_twist`], valid for rotation angles below pi/2.
pub fn twist_from_transform(t: &RigidTransform) -> Result<Twist> {
    let angle = t.rotation_angle();
    if angle >= FRAC_PI_2 {
        return Err(Error::RotationTooLarge { angle });
    }
    let r = &t.rotation;
    // R = Rx Ry Rz  =>  R02 = sin(beta), R12 = -sin(alpha)cos(beta), R01 = -cos(beta)sin(gamma)
    let beta = r[(0, 2)].clamp(-1.0, 1.0).asin();
    let alpha = (-r[(1, 2)]).atan2(r[(2, 2)]);
    let gamma = (-r[(0, 1)]).atan2(r[(0, 0)]);
    Ok(Twist {
        alpha,
        beta,
        gamma,
        x: t.translation.x,
        y: t.translation.y,
        z: t.translation.z,
    })
}

/// Cross-product matrix `[v]_x`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Least-squares rigid fit mapping `src` onto `dst` (SVD with reflection fix).
pub fn kabsch(src: &[Point], dst: &[Point]) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        return Err(Error::InvalidArgument(format!(
            "kabsch needs equal lengths, got {} and {}",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(Error::TooFewPoints {
            needed: 3,
            got: src.len(),
        });
    }
    let n = src.len() as f64;
    let cs = src.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let cd = dst.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    kabsch_from_covariance(&h, &cs, &cd)
}

pub(crate) fn kabsch_from_covariance(
    h: &Matrix3<f64>,
    cs: &Vector3<f64>,
    cd: &Vector3<f64>,
) -> Result<RigidTransform> {
    let svd = h.svd(true, true);
    let mut sv = svd.singular_values;
    sv.as_mut_slice()
        .sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    if !(sv[0] > 0.0) || sv[1] <= sv[0] * 1e-10 {
        return Err(Error::DegenerateConfiguration);
    }
    let u = svd.u.ok_or(Error::DegenerateConfiguration)?;
    let v_t = svd.v_t.ok_or(Error::DegenerateConfiguration)?;
    let v = v_t.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = v * d * u.transpose();
    let translation = cd - rotation * cs;
    Ok(RigidTransform {
        rotation,
        translation,
    })
}

/// Surface element of the dense map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surfel {
    pub position: Point,
    pub normal: Vector3<f64>,
    pub radius: f64,
    pub confidence: f64,
    /// Initialization timestamp.
    pub t0: f64,
    /// Last-update timestamp.
    pub tu: f64,
}

impl Surfel {
    pub fn validate(&self) -> Result<()> {
        if self.t0 > self.tu {
            return Err(Error::InvalidArgument("surfel t0 > tu".into()));
        }
        if (self.normal.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument("surfel normal is not unit".into()));
        }
        if !(self.radius > 0.0) {
            return Err(Error::InvalidArgument("surfel radius must be > 0".into()));
        }
        if self.confidence < 0.0 {
            return Err(Error::InvalidArgument("surfel confidence < 0".into()));
        }
        Ok(())
    }
}

/// Keyframe with a camera-to-world pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub id: usize,
    pub timestamp: f64,
    pub pose: RigidTransform,
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument("focal lengths must be > 0".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64)
            || !(self.cy >= 0.0 && self.cy < self.height as f64)
        {
            return Err(Error::InvalidArgument(
                "principal point outside the image".into(),
            ));
        }
        Ok(())
    }

    /// Pixel of a camera-frame point; `None` when depth is not positive.
    pub fn project_camera(&self, pc: &Point) -> Option<nalgebra::Vector2<f64>> {
        if pc.z <= 1e-6 {
            return None;
        }
        Some(nalgebra::Vector2::new(
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        ))
    }

    pub fn contains(&self, px: &nalgebra::Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }

    /// Unit-depth ray through pixel `(u, v)`.
    pub fn back_project(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

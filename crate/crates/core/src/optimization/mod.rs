//! Keyframe pose-graph optimization and robust bundle adjustment.

mod bundle_adjust;
mod pose_graph;

pub use bundle_adjust::{bundle_adjust, observation_jacobian, BaConfig, BaProblem, BaResult, Landmark, Observation};
pub use pose_graph::{pose_graph_optimize, preseed_loop, PgoParams, PgoResult};

use nalgebra::Vector2;

use crate::geometry::{CameraIntrinsics, Point, RigidTransform};

/// Pixel of world point `x` seen by a camera with world-to-camera pose
/// `t_cw`; `None` when the point is not in front of the camera.
pub fn project(k: &CameraIntrinsics, t_cw: &RigidTransform, x: &Point) -> Option<Vector2<f64>> {
    k.project_camera(&t_cw.apply(x))
}

/// Huber cost: `r^2 / 2` inside `delta`, linear outside.
pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * a * a
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Derivative of [`huber`] with respect to `r`.
pub fn huber_derivative(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        r
    } else {
        delta * r.signum()
    }
}

/// IRLS weight `rho'(s) / s` for a residual norm `s >= 0`.
pub fn huber_weight(s: f64, delta: f64) -> f64 {
    if s <= delta {
        1.0
    } else {
        delta / s
    }
}

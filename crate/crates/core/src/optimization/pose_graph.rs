use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::verification::{terms_cost, terms_of, PoseGraph, PoseSolver};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgoParams {
    /// Odometry weight relative to loop terms.
    pub lambda_odo: f64,
    /// Loops whose frozen weight is below this are left out.
    pub min_weight: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for PgoParams {
    fn default() -> Self {
        Self {
            lambda_odo: 1.0,
            min_weight: 0.25,
            max_iterations: 100,
            tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PgoResult {
    pub poses: Vec<RigidTransform>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
}

/// Minimizes the weighted edge residuals with loop weights frozen. Pose 0 is fixed.
pub fn pose_graph_optimize(graph: &PoseGraph, params: &PgoParams) -> Result<PgoResult> {
    graph.validate()?;
    if graph.poses.is_empty() {
        return Err(Error::InvalidArgument("empty pose graph".into()));
    }
    let weights: Vec<f64> = graph
        .loops
        .iter()
        .map(|e| if e.weight >= params.min_weight { e.weight } else { 0.0 })
        .collect();
    let terms = terms_of(graph, params.lambda_odo, Some(&weights));
    let mut poses = graph.poses.clone();
    let initial_cost = terms_cost(&poses, &terms);
    let mut solver = PoseSolver::default();
    let mut iterations = 0;
    if poses.len() > 1 {
        while iterations < params.max_iterations {
            iterations += 1;
            if solver.step(&mut poses, &terms)? < params.tolerance {
                break;
            }
        }
    }
    let final_cost = terms_cost(&poses, &terms);
    Ok(PgoResult {
        poses,
        initial_cost,
        final_cost,
        iterations,
    })
}

/// Moves pose `j` and every later pose rigidly so that the loop measurement
/// `t_ij = T_i^-1 T_j` holds exactly. Gives the solver a start near the
/// loop-consistent solution.
pub fn preseed_loop(poses: &mut [RigidTransform], i: usize, j: usize, t_ij: &RigidTransform) -> Result<()> {
    if i >= poses.len() || j >= poses.len() || i >= j {
        return Err(Error::InvalidArgument(format!("bad loop ({i}, {j}) for pre-seeding")));
    }
    let c = poses[i] * *t_ij * poses[j].inverse();
    for p in &mut poses[j..] {
        *p = (c * *p).orthonormalized();
    }
    Ok(())
}

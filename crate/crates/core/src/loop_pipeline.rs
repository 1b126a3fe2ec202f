//! Fragment construction and overlap-based loop proposal.

use rayon::prelude::*;
use rustc_hash::FxHashSet;

use crate::error::{Error, Result};
use crate::geometry::{Keyframe, PointCloud, RigidTransform};
use crate::preprocess::voxel_downsample;
use crate::spatial_index::SearchGrid;
use crate::verification::PoseGraph;

/// One sensor frame: camera-to-world pose and a camera-frame cloud.
#[derive(Debug, Clone)]
pub struct Frame {
    pub timestamp: f64,
    pub pose: RigidTransform,
    pub cloud: PointCloud,
}

/// Fused chunk of consecutive frames, attached to an anchor keyframe.
///
/// `local` is expressed in the anchor keyframe's camera frame and `cloud`
/// is the same points placed in the world by `pose`.
#[derive(Debug, Clone)]
pub struct Fragment {
    pub id: usize,
    pub cloud: PointCloud,
    pub local: PointCloud,
    pub pose: RigidTransform,
    pub anchor_keyframe: usize,
    /// Inclusive frame index range.
    pub frame_range: (usize, usize),
}

impl Fragment {
    /// Moves the fragment to a new anchor pose.
    pub fn set_pose(&mut self, pose: RigidTransform) {
        self.pose = pose;
        self.cloud = self.local.transformed(&pose);
    }
}

/// Candidate loop between a later fragment `source` and an earlier `target`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopProposal {
    pub source: usize,
    pub target: usize,
    pub overlap_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapParams {
    /// Distance under which a point counts as overlapping (m).
    pub d_overlap: f64,
    /// Minimum overlap ratio for a proposal.
    pub o_min: f64,
}

impl Default for OverlapParams {
    fn default() -> Self {
        Self {
            d_overlap: 0.1,
            o_min: 0.2,
        }
    }
}

/// Splits `frames` into chunks of `k` and fuses each chunk.
///
/// Each fragment is anchored at the keyframe whose timestamp is closest to
/// the chunk's middle frame (first of equals wins). Without keyframes the
/// middle frame itself is the anchor.
pub fn make_fragments(frames: &[Frame], keyframes: &[Keyframe], k: usize, leaf: f64) -> Result<Vec<Fragment>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    frames
        .chunks(k)
        .enumerate()
        .map(|(id, chunk)| make_fragment(id, id * k, chunk, keyframes, leaf))
        .collect()
}

/// Fuses one chunk whose first frame has global index `first`.
pub fn make_fragment(id: usize, first: usize, chunk: &[Frame], keyframes: &[Keyframe], leaf: f64) -> Result<Fragment> {
    if chunk.is_empty() {
        return Err(Error::InvalidArgument("empty fragment chunk".into()));
    }
    let mid = chunk.len() / 2;
    let (anchor_keyframe, pose) = anchor_for(chunk[mid].timestamp, keyframes).unwrap_or((first + mid, chunk[mid].pose));
    let world: Vec<PointCloud> = chunk.iter().map(|f| f.cloud.transformed(&f.pose)).collect();
    let union = PointCloud::concat(&world);
    let cloud = if union.is_empty() {
        union
    } else {
        voxel_downsample(&union, leaf)?
    };
    let local = cloud.transformed(&pose.inverse());
    Ok(Fragment {
        id,
        cloud,
        local,
        pose,
        anchor_keyframe,
        frame_range: (first, first + chunk.len() - 1),
    })
}

fn anchor_for(t: f64, keyframes: &[Keyframe]) -> Option<(usize, RigidTransform)> {
    keyframes
        .iter()
        .fold(None::<&Keyframe>, |best, kf| match best {
            Some(b) if (b.timestamp - t).abs() <= (kf.timestamp - t).abs() => Some(b),
            _ => Some(kf),
        })
        .map(|kf| (kf.id, kf.pose))
}

/// Fraction of `source` points within `d` of some point indexed by `target`.
pub fn overlap_ratio(source: &PointCloud, target: &SearchGrid, d: f64) -> f64 {
    if source.is_empty() {
        return 0.0;
    }
    let hits = source.positions.par_iter().filter(|p| target.nn_within_squared(p, d).is_some()).count();
    hits as f64 / source.len() as f64
}

/// Proposes loops `(i, j)`, `i >= j + 2`, whose world clouds overlap by at
/// least `o_min`. Pairs already joined by an edge of `graph` are skipped.
/// Sorted by descending overlap, then by pair.
pub fn propose_loops(fragments: &[Fragment], graph: &PoseGraph, params: &OverlapParams) -> Result<Vec<LoopProposal>> {
    if !(params.d_overlap > 0.0) {
        return Err(Error::InvalidArgument("d_overlap must be > 0".into()));
    }
    let linked: FxHashSet<(usize, usize)> = graph
        .odometry
        .iter()
        .chain(&graph.loops)
        .map(|e| (e.i.min(e.j), e.i.max(e.j)))
        .collect();
    let pairs: Vec<(usize, usize)> = (0..fragments.len())
        .flat_map(|i| (0..i.saturating_sub(1)).map(move |j| (i, j)))
        .filter(|&(i, j)| !linked.contains(&(j, i)))
        .filter(|&(i, j)| !fragments[i].cloud.is_empty() && !fragments[j].cloud.is_empty())
        .collect();
    let mut targets: Vec<usize> = pairs.iter().map(|&(_, j)| j).collect();
    targets.sort_unstable();
    targets.dedup();
    let grids: Vec<(usize, SearchGrid)> = targets
        .par_iter()
        .map(|&j| SearchGrid::new(&fragments[j].cloud.positions, params.d_overlap).map(|g| (j, g)))
        .collect::<Result<_>>()?;
    let grid_of = |j: usize| &grids[grids.binary_search_by_key(&j, |(k, _)| *k).expect("grid built")].1;
    let mut out: Vec<LoopProposal> = pairs
        .par_iter()
        .filter_map(|&(i, j)| {
            let r = overlap_ratio(&fragments[i].cloud, grid_of(j), params.d_overlap);
            (r >= params.o_min).then_some(LoopProposal {
                source: i,
                target: j,
                overlap_ratio: r,
            })
        })
        .collect();
    out.sort_by(|a, b| {
        b.overlap_ratio
            .total_cmp(&a.overlap_ratio)
            .then(a.source.cmp(&b.source))
            .then(a.target.cmp(&b.target))
    });
    Ok(out)
}

//! Surfel map correction after keyframe pose updates, and orphan pruning.
//!
//! A surfel is carried by the keyframes that observed it between its
//! creation and last update: its new position is the mean of
//! `T_new T_old^-1 p` over those keyframes, its normal the normalized mean of
//! `R_new R_old^-1 n`.

use nalgebra::Vector3;
use rayon::prelude::*;
use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Keyframe, RigidTransform, Surfel};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SurfelMap {
    pub surfels: Vec<Surfel>,
    /// Observing keyframe ids per surfel, in timestamp order.
    pub visibility: Vec<Vec<usize>>,
}

impl SurfelMap {
    pub fn new(surfels: Vec<Surfel>) -> Self {
        let visibility = vec![Vec::new(); surfels.len()];
        Self { surfels, visibility }
    }

    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }

    /// Checks that the visibility table lines up with the surfels and only
    /// names known keyframes.
    pub fn validate(&self, keyframes: &[Keyframe]) -> Result<()> {
        if self.visibility.len() != self.surfels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} visibility lists for {} surfels",
                self.visibility.len(),
                self.surfels.len()
            )));
        }
        let ids: FxHashMap<usize, f64> = keyframes.iter().map(|k| (k.id, k.timestamp)).collect();
        for (s, vis) in self.visibility.iter().enumerate() {
            for id in vis {
                if !ids.contains_key(id) {
                    return Err(Error::MissingData(format!("surfel {s} references unknown keyframe {id}")));
                }
            }
        }
        Ok(())
    }
}

/// Row-major metric depth image; zero marks a missing measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub depth: Vec<f64>,
}

impl DepthMap {
    pub fn at(&self, u: f64, v: f64) -> Option<f64> {
        let (x, y) = (u.floor(), v.floor());
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        let d = self.depth[y as usize * self.width as usize + x as usize];
        (d > 0.0).then_some(d)
    }
}

/// Keyframes of `visible` strictly inside the surfel's `(t0, tu)` window.
pub fn influencers<'a>(s: &Surfel, visible: &[&'a Keyframe]) -> Vec<&'a Keyframe> {
    visible.iter().copied().filter(|k| s.t0 < k.timestamp && k.timestamp < s.tu).collect()
}

/// Influencers, or the observing keyframe nearest in time to the window when
/// the strict window is empty.
fn effective_influencers<'a>(s: &Surfel, visible: &[&'a Keyframe]) -> Vec<&'a Keyframe> {
    let inf = influencers(s, visible);
    if !inf.is_empty() {
        return inf;
    }
    let gap = |k: &Keyframe| {
        if k.timestamp < s.t0 {
            s.t0 - k.timestamp
        } else if k.timestamp > s.tu {
            k.timestamp - s.tu
        } else {
            0.0
        }
    };
    visible
        .iter()
        .copied()
        .fold(None::<&Keyframe>, |best, k| match best {
            Some(b) if gap(b) <= gap(k) => Some(b),
            _ => Some(k),
        })
        .into_iter()
        .collect()
}

/// Moves every surfel with its influencing keyframes from `old` to `new`
/// poses. Surfels without any observer, or whose influencers did not move,
/// are returned untouched.
pub fn correct_surfels(map: &SurfelMap, old: &[Keyframe], new: &[Keyframe]) -> Result<SurfelMap> {
    map.validate(old)?;
    let new_by_id: FxHashMap<usize, &RigidTransform> = new.iter().map(|k| (k.id, &k.pose)).collect();
    let mut by_id: FxHashMap<usize, (&Keyframe, Option<RigidTransform>)> = FxHashMap::default();
    for k in old {
        let n = new_by_id
            .get(&k.id)
            .ok_or_else(|| Error::MissingData(format!("keyframe {} missing from new poses", k.id)))?;
        let correction = (**n != k.pose).then(|| **n * k.pose.inverse());
        by_id.insert(k.id, (k, correction));
    }
    let surfels = map
        .surfels
        .par_iter()
        .zip(&map.visibility)
        .map(|(s, vis)| {
            let visible: Vec<&Keyframe> = vis.iter().map(|id| by_id[id].0).collect();
            let inf = effective_influencers(s, &visible);
            let corrections: Vec<Option<RigidTransform>> = inf.iter().map(|k| by_id[&k.id].1).collect();
            if corrections.iter().all(Option::is_none) {
                return *s;
            }
            let k = corrections.len() as f64;
            let mut p = Vector3::zeros();
            let mut n = Vector3::zeros();
            for c in &corrections {
                match c {
                    Some(t) => {
                        p += t.apply(&s.position);
                        n += t.rotation * s.normal;
                    }
                    None => {
                        p += s.position;
                        n += s.normal;
                    }
                }
            }
            let n = n / k;
            let len = n.norm();
            Surfel {
                position: p / k,
                normal: if len > 0.0 { n / len } else { s.normal },
                ..*s
            }
        })
        .collect();
    Ok(SurfelMap {
        surfels,
        visibility: map.visibility.clone(),
    })
}

/// Drops surfels that no keyframe observes.
pub fn prune_orphans(map: &SurfelMap) -> SurfelMap {
    let (surfels, visibility) = map
        .surfels
        .iter()
        .zip(&map.visibility)
        .filter(|(_, v)| !v.is_empty())
        .map(|(s, v)| (*s, v.clone()))
        .unzip();
    SurfelMap { surfels, visibility }
}

/// Whether keyframe pose `pose` (camera-to-world) sees surfel `s`: in front,
/// inside the image, facing the camera, and not behind the depth map by
/// more than `tolerance`.
pub fn observes(k: &CameraIntrinsics, pose: &RigidTransform, s: &Surfel, depth: Option<&DepthMap>, tolerance: f64) -> bool {
    let center = pose.translation;
    if s.normal.dot(&(s.position - center)) >= 0.0 {
        return false;
    }
    let pc = pose.inverse().apply(&s.position);
    let Some(px) = k.project_camera(&pc) else {
        return false;
    };
    if !k.contains(&px) {
        return false;
    }
    match depth.and_then(|d| d.at(px.x, px.y)) {
        Some(d) => pc.z <= d + tolerance,
        None => true,
    }
}

/// Recomputes every surfel's observer list. `depth`, when given, holds one
/// depth map per keyframe in the same order.
pub fn compute_visibility(
    map: &SurfelMap,
    keyframes: &[Keyframe],
    intrinsics: &CameraIntrinsics,
    depth: Option<&[DepthMap]>,
    tolerance: f64,
) -> Result<SurfelMap> {
    if let Some(d) = depth {
        if d.len() != keyframes.len() {
            return Err(Error::InvalidArgument(format!("{} depth maps for {} keyframes", d.len(), keyframes.len())));
        }
    }
    let mut order: Vec<usize> = (0..keyframes.len()).collect();
    order.sort_by(|&a, &b| keyframes[a].timestamp.total_cmp(&keyframes[b].timestamp).then(a.cmp(&b)));
    let visibility = map
        .surfels
        .par_iter()
        .map(|s| {
            order
                .iter()
                .filter(|&&i| observes(intrinsics, &keyframes[i].pose, s, depth.map(|d| &d[i]), tolerance))
                .map(|&i| keyframes[i].id)
                .collect()
        })
        .collect();
    Ok(SurfelMap {
        surfels: map.surfels.clone(),
        visibility,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn surfel(p: [f64; 3], n: [f64; 3], t0: f64, tu: f64) -> Surfel {
        Surfel {
            position: Vector3::from(p),
            normal: Vector3::from(n).normalize(),
            radius: 0.01,
            confidence: 1.0,
            t0,
            tu,
        }
    }

    fn kf(id: usize, t: f64, pose: RigidTransform) -> Keyframe {
        Keyframe { id, timestamp: t, pose }
    }

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    #[test]
    fn influencer_window() {
        let kfs: Vec<_> = [1.0, 5.0, 9.0].iter().enumerate().map(|(i, &t)| kf(i, t, RigidTransform::identity())).collect();
        let refs: Vec<&Keyframe> = kfs.iter().collect();
        let ids = |v: Vec<&Keyframe>| v.iter().map(|k| k.id).collect::<Vec<_>>();
        assert_eq!(ids(influencers(&surfel([0.0; 3], [0.0, 0.0, 1.0], 2.0, 8.0), &refs)), vec![1]);
        assert_eq!(ids(influencers(&surfel([0.0; 3], [0.0, 0.0, 1.0], 0.0, 10.0), &refs)), vec![0, 1, 2]);
        let single = surfel([0.0; 3], [0.0, 0.0, 1.0], 5.0, 5.0);
        assert!(influencers(&single, &refs).is_empty());
        assert_eq!(ids(effective_influencers(&single, &refs)), vec![1]);
    }

    fn two_keyframe_map(s: Surfel) -> (SurfelMap, Vec<Keyframe>) {
        let old = vec![kf(0, 1.0, RigidTransform::identity()), kf(1, 2.0, RigidTransform::identity())];
        let mut map = SurfelMap::new(vec![s]);
        map.visibility[0] = vec![0, 1];
        (map, old)
    }

    #[test]
    fn correction_examples() {
        let s = surfel([1.0, 2.0, 3.0], [0.0, 1.0, 1.0], 0.0, 10.0);
        let (map, old) = two_keyframe_map(s);

        let same = correct_surfels(&map, &old, &old).unwrap();
        assert_eq!(same, map);

        let t = |z| RigidTransform::from_translation(Vector3::new(0.0, 0.0, z));
        let new = vec![kf(0, 1.0, t(0.1)), kf(1, 2.0, t(0.1))];
        let c = correct_surfels(&map, &old, &new).unwrap();
        assert!((c.surfels[0].position - Vector3::new(1.0, 2.0, 3.1)).norm() < 1e-12);
        assert!((c.surfels[0].normal - s.normal).norm() < 1e-12);

        let new = vec![kf(0, 1.0, t(0.1)), kf(1, 2.0, t(0.3))];
        let c = correct_surfels(&map, &old, &new).unwrap();
        assert!((c.surfels[0].position - Vector3::new(1.0, 2.0, 3.2)).norm() < 1e-12);
        assert_eq!(c.surfels[0].radius, s.radius);
        assert_eq!(c.surfels[0].t0, s.t0);
    }

    #[test]
    fn uniform_rotation_is_rigid() {
        let s = surfel([1.0, -2.0, 0.5], [0.3, 0.2, 1.0], 0.0, 10.0);
        let (map, old) = two_keyframe_map(s);
        let d = RigidTransform::from_axis_angle(&Vector3::new(0.1, 0.5, 1.0), 0.4, Vector3::new(0.2, -0.1, 0.05));
        let new: Vec<_> = old.iter().map(|k| Keyframe { pose: d * k.pose, ..*k }).collect();
        let c = correct_surfels(&map, &old, &new).unwrap();
        assert!((c.surfels[0].position - d.apply(&s.position)).norm() < 1e-9);
        assert!((c.surfels[0].normal - d.rotation * s.normal).norm() < 1e-9);
        assert!((c.surfels[0].normal.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn unobserved_surfel_is_untouched() {
        let s = surfel([1.0, 2.0, 3.0], [0.0, 0.0, 1.0], 0.0, 10.0);
        let old = vec![kf(0, 1.0, RigidTransform::identity())];
        let map = SurfelMap::new(vec![s]);
        let new = vec![kf(0, 1.0, RigidTransform::from_translation(Vector3::x()))];
        assert_eq!(correct_surfels(&map, &old, &new).unwrap(), map);
    }

    #[test]
    fn visibility_examples() {
        let cams = vec![kf(0, 0.0, RigidTransform::identity())];
        let front = surfel([0.0, 0.0, 1.0], [0.0, 0.0, -1.0], 0.0, 1.0);
        let away = surfel([0.0, 0.0, 1.0], [0.0, 0.0, 1.0], 0.0, 1.0);
        let behind = surfel([0.0, 0.0, -1.0], [0.0, 0.0, 1.0], 0.0, 1.0);
        let map = SurfelMap::new(vec![front, away, behind]);
        let v = compute_visibility(&map, &cams, &k(), None, 0.05).unwrap();
        assert_eq!(v.visibility, vec![vec![0], vec![], vec![]]);
        let pruned = prune_orphans(&v);
        assert_eq!(pruned.surfels, vec![front]);

        // A wall at 0.5 m hides the surfel at 1 m.
        let wall = DepthMap {
            width: 640,
            height: 480,
            depth: vec![0.5; 640 * 480],
        };
        let v = compute_visibility(&SurfelMap::new(vec![front]), &cams, &k(), Some(&[wall]), 0.05).unwrap();
        assert!(v.visibility[0].is_empty());
        assert!(prune_orphans(&v).is_empty());
    }
}

//! Sequence directories consumed by the pipeline.
//!
//! ```text
//! odometry.txt            per-frame odometry poses (TUM)
//! clouds/frame_NNNNNN.ply per-frame clouds, camera coordinates
//! keyframes.txt           keyframe poses (TUM), ids in line order   [optional]
//! camera.cfg              fx fy cx cy width height                  [optional]
//! map.ply, visibility.txt surfel map and observing keyframe ids     [optional]
//! ba.json                 landmark problem                          [optional]
//! groundtruth.txt         true per-frame poses (TUM)                [optional]
//! truth_surface.ply       samples of the true surface               [optional]
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::ba_file::{read_ba_problem, write_ba_problem};
use super::config::{assign, unknown_key, FlatConfig};
use super::ply::{read_ply, read_surfel_ply, write_ply, write_surfel_ply, PlyFormat};
use super::synth::SynthScene;
use super::trajectory::TrajectoryFile;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Keyframe, PointCloud};
use crate::loop_pipeline::Frame;
use crate::map_correction::SurfelMap;
use crate::optimization::BaProblem;

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub frames: Vec<Frame>,
    pub keyframes: Vec<Keyframe>,
    pub intrinsics: Option<CameraIntrinsics>,
    pub surfels: Option<SurfelMap>,
    pub ba: Option<BaProblem>,
    pub truth: Option<TrajectoryFile>,
    pub truth_surface: Option<PointCloud>,
}

impl Dataset {
    pub fn from_synth(s: &SynthScene) -> Self {
        let frames = s
            .timestamps
            .iter()
            .zip(&s.odometry)
            .zip(&s.clouds)
            .map(|((&timestamp, &pose), cloud)| Frame {
                timestamp,
                pose,
                cloud: cloud.clone(),
            })
            .collect();
        Self {
            frames,
            keyframes: s.keyframes.clone(),
            intrinsics: Some(s.intrinsics),
            surfels: Some(s.surfels.clone()),
            ba: Some(s.ba.clone()),
            truth: TrajectoryFile::from_poses(&s.timestamps, &s.truth).ok(),
            truth_surface: Some(s.truth_surface.clone()),
        }
    }

    pub fn odometry(&self) -> TrajectoryFile {
        TrajectoryFile {
            records: self
                .frames
                .iter()
                .map(|f| super::trajectory::TrajectoryRecord::new(f.timestamp, &f.pose))
                .collect(),
        }
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let odometry = TrajectoryFile::read(dir.join("odometry.txt"))?;
        let frames = odometry
            .records
            .iter()
            .enumerate()
            .map(|(k, r)| {
                Ok(Frame {
                    timestamp: r.timestamp,
                    pose: r.pose(),
                    cloud: read_ply(cloud_path(dir, k))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let keyframes = match optional(dir, "keyframes.txt") {
            Some(p) => TrajectoryFile::read(p)?
                .records
                .iter()
                .enumerate()
                .map(|(id, r)| Keyframe {
                    id,
                    timestamp: r.timestamp,
                    pose: r.pose(),
                })
                .collect(),
            None => Vec::new(),
        };
        let intrinsics = optional(dir, "camera.cfg").map(read_intrinsics).transpose()?;
        let surfels = match optional(dir, "map.ply") {
            Some(p) => {
                let surfels = read_surfel_ply(p)?;
                let visibility = match optional(dir, "visibility.txt") {
                    Some(v) => read_visibility(v)?,
                    None => vec![Vec::new(); surfels.len()],
                };
                Some(SurfelMap { surfels, visibility })
            }
            None => None,
        };
        Ok(Self {
            frames,
            keyframes,
            intrinsics,
            surfels,
            ba: optional(dir, "ba.json").map(read_ba_problem).transpose()?,
            truth: optional(dir, "groundtruth.txt").map(TrajectoryFile::read).transpose()?,
            truth_surface: optional(dir, "truth_surface.ply").map(read_ply).transpose()?,
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let clouds = dir.join("clouds");
        std::fs::create_dir_all(&clouds).map_err(|e| Error::io(&clouds, e))?;
        self.odometry().write(dir.join("odometry.txt"))?;
        for (k, f) in self.frames.iter().enumerate() {
            write_ply(cloud_path(dir, k), &f.cloud, PlyFormat::BinaryLittleEndian)?;
        }
        if !self.keyframes.is_empty() {
            let ts: Vec<f64> = self.keyframes.iter().map(|k| k.timestamp).collect();
            let poses: Vec<_> = self.keyframes.iter().map(|k| k.pose).collect();
            TrajectoryFile::from_poses(&ts, &poses)?.write(dir.join("keyframes.txt"))?;
        }
        if let Some(k) = &self.intrinsics {
            write_intrinsics(dir.join("camera.cfg"), k)?;
        }
        if let Some(m) = &self.surfels {
            write_surfel_ply(dir.join("map.ply"), &m.surfels, PlyFormat::BinaryLittleEndian)?;
            write_visibility(dir.join("visibility.txt"), &m.visibility)?;
        }
        if let Some(b) = &self.ba {
            write_ba_problem(dir.join("ba.json"), b)?;
        }
        if let Some(t) = &self.truth {
            t.write(dir.join("groundtruth.txt"))?;
        }
        if let Some(s) = &self.truth_surface {
            write_ply(dir.join("truth_surface.ply"), s, PlyFormat::BinaryLittleEndian)?;
        }
        Ok(())
    }
}

fn cloud_path(dir: &Path, k: usize) -> PathBuf {
    dir.join("clouds").join(format!("frame_{k:06}.ply"))
}

fn optional(dir: &Path, name: &str) -> Option<PathBuf> {
    let p = dir.join(name);
    p.exists().then_some(p)
}

pub fn read_intrinsics(path: impl AsRef<Path>) -> Result<CameraIntrinsics> {
    let c = FlatConfig::read(path)?;
    let (mut fx, mut fy, mut cx, mut cy, mut width, mut height) = (0.0, 0.0, 0.0, 0.0, 0u32, 0u32);
    for (key, v, l) in &c.entries {
        match key.as_str() {
            "fx" => assign(&mut fx, key, v, *l)?,
            "fy" => assign(&mut fy, key, v, *l)?,
            "cx" => assign(&mut cx, key, v, *l)?,
            "cy" => assign(&mut cy, key, v, *l)?,
            "width" => assign(&mut width, key, v, *l)?,
            "height" => assign(&mut height, key, v, *l)?,
            _ => return Err(unknown_key(key, *l)),
        }
    }
    CameraIntrinsics::new(fx, fy, cx, cy, width, height)
}

pub fn write_intrinsics(path: impl AsRef<Path>, k: &CameraIntrinsics) -> Result<()> {
    let mut c = FlatConfig::default();
    c.push("fx", k.fx);
    c.push("fy", k.fy);
    c.push("cx", k.cx);
    c.push("cy", k.cy);
    c.push("width", k.width);
    c.push("height", k.height);
    let path = path.as_ref();
    std::fs::write(path, c.to_text()).map_err(|e| Error::io(path, e))
}

/// One line per surfel: whitespace-separated observing keyframe ids.
pub fn parse_visibility(text: &str) -> Result<Vec<Vec<usize>>> {
    text.lines()
        .enumerate()
        .map(|(k, line)| {
            line.split_whitespace()
                .map(|s| s.parse().map_err(|_| Error::parse_line(k + 1, format!("bad keyframe id `{s}`"))))
                .collect()
        })
        .collect()
}

pub fn read_visibility(path: impl AsRef<Path>) -> Result<Vec<Vec<usize>>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_visibility(&text)
}

pub fn write_visibility(path: impl AsRef<Path>, visibility: &[Vec<usize>]) -> Result<()> {
    let mut s = String::new();
    for v in visibility {
        let ids: Vec<String> = v.iter().map(usize::to_string).collect();
        writeln!(s, "{}", ids.join(" ")).unwrap();
    }
    let path = path.as_ref();
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

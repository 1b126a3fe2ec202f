//! TUM trajectory text files: `timestamp tx ty tz qx qy qz qw` per line.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRecord {
    pub timestamp: f64,
    pub translation: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

impl TrajectoryRecord {
    pub fn new(timestamp: f64, pose: &RigidTransform) -> Self {
        Self {
            timestamp,
            translation: pose.translation,
            rotation: pose.quaternion(),
        }
    }

    pub fn pose(&self) -> RigidTransform {
        RigidTransform::from_quaternion(&self.rotation, self.translation)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryFile {
    pub records: Vec<TrajectoryRecord>,
}

impl TrajectoryFile {
    pub fn from_poses(timestamps: &[f64], poses: &[RigidTransform]) -> Result<Self> {
        if timestamps.len() != poses.len() {
            return Err(Error::InvalidArgument("timestamps and poses differ in length".into()));
        }
        let t = Self {
            records: timestamps.iter().zip(poses).map(|(&t, p)| TrajectoryRecord::new(t, p)).collect(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn poses(&self) -> Vec<RigidTransform> {
        self.records.iter().map(TrajectoryRecord::pose).collect()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.timestamp).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.records.windows(2) {
            if !(w[1].timestamp > w[0].timestamp) {
                return Err(Error::InvalidArgument(format!("timestamps not increasing at {}", w[1].timestamp)));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        let mut last = f64::NEG_INFINITY;
        for (k, line) in text.lines().enumerate() {
            let line_no = k + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals = line
                .split_whitespace()
                .map(|s| s.parse::<f64>().map_err(|_| Error::parse_line(line_no, format!("bad number `{s}`"))))
                .collect::<Result<Vec<f64>>>()?;
            if vals.len() != 8 {
                return Err(Error::parse_line(line_no, format!("expected 8 fields, found {}", vals.len())));
            }
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::parse_line(line_no, "non-finite value"));
            }
            if !(vals[0] > last) {
                return Err(Error::parse_line(line_no, "timestamps must be strictly increasing"));
            }
            last = vals[0];
            let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
            if (q.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::parse_line(line_no, format!("quaternion norm {} is not 1", q.norm())));
            }
            records.push(TrajectoryRecord {
                timestamp: vals[0],
                translation: Vector3::new(vals[1], vals[2], vals[3]),
                rotation: UnitQuaternion::new_unchecked(q),
            });
        }
        Ok(Self { records })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# timestamp tx ty tz qx qy qz qw\n");
        for r in &self.records {
            let q = r.rotation.quaternion();
            writeln!(
                s,
                "{} {} {} {} {} {} {} {}",
                r.timestamp, r.translation.x, r.translation.y, r.translation.z, q.i, q.j, q.k, q.w
            )
            .unwrap();
        }
        s
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

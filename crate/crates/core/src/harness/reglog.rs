//! Registration logs: an `i j n` line followed by four rows of the 4x4
//! transform, per entry.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Matrix4;

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub i: usize,
    pub j: usize,
    /// Total fragment count.
    pub n: usize,
    pub transform: RigidTransform,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegistrationLog {
    pub entries: Vec<LogEntry>,
}

impl RegistrationLog {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(k, l)| (k + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let mut entries = Vec::new();
        while let Some((line_no, head)) = lines.next() {
            let h: Vec<&str> = head.split_whitespace().collect();
            if h.len() != 3 {
                return Err(Error::parse_line(line_no, format!("expected `i j n`, found {} fields", h.len())));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| Error::parse_line(line_no, format!("bad index `{s}`")));
            let (i, j, n) = (int(h[0])?, int(h[1])?, int(h[2])?);
            if i >= j {
                return Err(Error::parse_line(line_no, format!("entry ({i}, {j}) must have i < j")));
            }
            let mut m = Matrix4::zeros();
            for r in 0..4 {
                let Some((row_no, row)) = lines.next() else {
                    return Err(Error::parse_line(line_no + r + 1, "entry truncated: missing matrix row"));
                };
                let vals = row
                    .split_whitespace()
                    .map(|s| s.parse::<f64>().map_err(|_| Error::parse_line(row_no, format!("bad number `{s}`"))))
                    .collect::<Result<Vec<f64>>>()?;
                if vals.len() != 4 {
                    return Err(Error::parse_line(row_no, format!("expected 4 values, found {}", vals.len())));
                }
                for c in 0..4 {
                    m[(r, c)] = vals[c];
                }
            }
            let transform = RigidTransform::from_matrix4(&m).map_err(|e| Error::parse_line(line_no, format!("invalid transform: {e}")))?;
            entries.push(LogEntry { i, j, n, transform });
        }
        Ok(Self { entries })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            writeln!(s, "{} {} {}", e.i, e.j, e.n).unwrap();
            let m = e.transform.to_matrix4();
            for r in 0..4 {
                writeln!(s, "{} {} {} {}", m[(r, 0)], m[(r, 1)], m[(r, 2)], m[(r, 3)]).unwrap();
            }
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Position;
    use nalgebra::Vector3;

    #[test]
    fn round_trip() {
        let log = RegistrationLog {
            entries: (0..5)
                .map(|k| LogEntry {
                    i: k,
                    j: k + 2,
                    n: 10,
                    transform: RigidTransform::from_axis_angle(&Vector3::new(0.0, 1.0, 1.0), 0.3 * k as f64, Vector3::new(1.0, 2.0, k as f64)),
                })
                .collect(),
        };
        let back = RegistrationLog::parse(&log.to_text()).unwrap();
        assert_eq!(back.entries.len(), 5);
        for (a, b) in back.entries.iter().zip(&log.entries) {
            assert_eq!((a.i, a.j, a.n), (b.i, b.j, b.n));
            assert!((a.transform.to_matrix4() - b.transform.to_matrix4()).amax() < 1e-12);
        }
    }

    #[test]
    fn malformed() {
        let cases = [
            ("0 1 2\n1 0 0 0\n0 1 0 0\n0 0 1 0\n", 5),
            ("0 1\n", 1),
            ("1 0 2\n1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n", 1),
            ("0 1 2\n1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 1 1\n", 1),
            ("0 1 2\n1 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n", 2),
        ];
        for (text, line) in cases {
            match RegistrationLog::parse(text) {
                Err(Error::Parse {
                    position: Position::Line(l),
                    ..
                }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("unexpected {other:?} for {text:?}"),
            }
        }
    }
}

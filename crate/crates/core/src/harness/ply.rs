//! PLY point clouds (ASCII and binary little-endian).
//!
//! Only the `vertex` element is read. Known columns are `x y z` and the
//! optional `nx ny nz`; other scalar columns are carried in [`PlyTable`] and
//! ignored by [`read_ply`]. List properties on `vertex` are rejected.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Surfel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

/// Vertex columns by name, row-major values.
#[derive(Debug, Clone, PartialEq)]
pub struct PlyTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl PlyTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

struct Header {
    format: PlyFormat,
    vertex_count: usize,
    columns: Vec<(String, Scalar)>,
    /// Byte offset of the body.
    body: usize,
    /// Line number of the first body line (ASCII).
    body_line: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut pos = 0;
    let mut line_no = 0;
    let next_line = |pos: &mut usize| -> Option<String> {
        if *pos >= bytes.len() {
            return None;
        }
        let end = bytes[*pos..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |e| *pos + e);
        let s = String::from_utf8_lossy(&bytes[*pos..end]).trim_end_matches('\r').to_string();
        *pos = (end + 1).min(bytes.len() + 1);
        Some(s)
    };
    line_no += 1;
    if next_line(&mut pos).as_deref() != Some("ply") {
        return Err(Error::parse_line(1, "missing `ply` magic"));
    }
    let mut format = None;
    let mut vertex_count = None;
    let mut columns = Vec::new();
    // Whether the element being described is `vertex`, and whether no
    // element with data precedes it.
    let mut in_vertex = false;
    let mut before_vertex = true;
    loop {
        line_no += 1;
        let Some(line) = next_line(&mut pos) else {
            return Err(Error::parse_line(line_no, "header ended without `end_header`"));
        };
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.first().copied() {
            Some("end_header") => break,
            Some("comment") | Some("obj_info") | None => {}
            Some("format") => {
                format = Some(match (tok.get(1).copied(), tok.get(2).copied()) {
                    (Some("ascii"), Some("1.0")) => PlyFormat::Ascii,
                    (Some("binary_little_endian"), Some("1.0")) => PlyFormat::BinaryLittleEndian,
                    _ => return Err(Error::parse_line(line_no, format!("unsupported format `{line}`"))),
                })
            }
            Some("element") => {
                let (Some(name), Some(count)) = (tok.get(1), tok.get(2)) else {
                    return Err(Error::parse_line(line_no, "malformed element line"));
                };
                let count: usize = count
                    .parse()
                    .map_err(|_| Error::parse_line(line_no, format!("bad element count `{count}`")))?;
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertex_count = Some(count);
                } else if vertex_count.is_none() && count > 0 {
                    before_vertex = false;
                }
            }
            Some("property") => {
                if tok.get(1) == Some(&"list") {
                    if in_vertex || !before_vertex {
                        return Err(Error::UnsupportedProperty(line.trim().to_string()));
                    }
                    continue;
                }
                let (Some(ty), Some(name)) = (tok.get(1), tok.get(2)) else {
                    return Err(Error::parse_line(line_no, "malformed property line"));
                };
                let scalar = Scalar::parse(ty).ok_or_else(|| Error::UnsupportedProperty(format!("{ty} {name}")))?;
                if in_vertex {
                    columns.push((name.to_string(), scalar));
                } else if !before_vertex {
                    return Err(Error::UnsupportedProperty(format!("element data before vertex: {name}")));
                }
            }
            Some(other) => return Err(Error::parse_line(line_no, format!("unknown header keyword `{other}`"))),
        }
    }
    let format = format.ok_or_else(|| Error::parse_line(line_no, "missing format line"))?;
    let vertex_count = vertex_count.ok_or_else(|| Error::parse_line(line_no, "no vertex element"))?;
    if !before_vertex {
        return Err(Error::UnsupportedProperty("non-empty element before vertex".into()));
    }
    for c in ["x", "y", "z"] {
        if !columns.iter().any(|(n, _)| n == c) {
            return Err(Error::parse_line(line_no, format!("vertex has no `{c}` property")));
        }
    }
    Ok(Header {
        format,
        vertex_count,
        columns,
        body: pos.min(bytes.len()),
        body_line: line_no + 1,
    })
}

/// Parses the vertex table of a PLY document.
pub fn parse_ply_table(bytes: &[u8]) -> Result<PlyTable> {
    let h = parse_header(bytes)?;
    let names: Vec<String> = h.columns.iter().map(|(n, _)| n.clone()).collect();
    let body = &bytes[h.body..];
    let mut rows = Vec::with_capacity(h.vertex_count);
    match h.format {
        PlyFormat::Ascii => {
            let text = std::str::from_utf8(body).map_err(|e| Error::parse_offset(h.body + e.valid_up_to(), "invalid UTF-8 in ASCII body"))?;
            let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
            for v in 0..h.vertex_count {
                let Some((k, line)) = lines.next() else {
                    return Err(Error::parse_line(
                        h.body_line + v,
                        format!("expected {} vertices, found {v}", h.vertex_count),
                    ));
                };
                let line_no = h.body_line + k;
                let vals: Vec<&str> = line.split_whitespace().collect();
                if vals.len() < names.len() {
                    return Err(Error::parse_line(line_no, format!("expected {} values, found {}", names.len(), vals.len())));
                }
                let row = vals[..names.len()]
                    .iter()
                    .map(|s| s.parse::<f64>().map_err(|_| Error::parse_line(line_no, format!("bad number `{s}`"))))
                    .collect::<Result<Vec<f64>>>()?;
                rows.push(row);
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let stride: usize = h.columns.iter().map(|(_, s)| s.size()).sum();
            for v in 0..h.vertex_count {
                let start = v * stride;
                if start + stride > body.len() {
                    return Err(Error::parse_offset(
                        h.body + body.len(),
                        format!("truncated binary body: vertex {v} of {} needs {stride} bytes", h.vertex_count),
                    ));
                }
                let mut off = start;
                let row = h
                    .columns
                    .iter()
                    .map(|(_, s)| {
                        let x = s.read(&body[off..]);
                        off += s.size();
                        x
                    })
                    .collect();
                rows.push(row);
            }
        }
    }
    Ok(PlyTable { columns: names, rows })
}

fn cloud_from_table(t: &PlyTable) -> Result<PointCloud> {
    let col = |n: &str| t.column(n);
    let (x, y, z) = (col("x").unwrap(), col("y").unwrap(), col("z").unwrap());
    let positions: Vec<_> = t.rows.iter().map(|r| Vector3::new(r[x], r[y], r[z])).collect();
    match (col("nx"), col("ny"), col("nz")) {
        (Some(a), Some(b), Some(c)) => {
            let normals = t.rows.iter().map(|r| Vector3::new(r[a], r[b], r[c])).collect();
            PointCloud::with_normals(positions, normals)
        }
        _ => Ok(PointCloud::new(positions)),
    }
}

pub fn parse_ply(bytes: &[u8]) -> Result<PointCloud> {
    cloud_from_table(&parse_ply_table(bytes)?)
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&bytes)
}

/// Serializes a table of double columns.
pub fn encode_ply_table(columns: &[&str], rows: &[Vec<f64>], format: PlyFormat) -> Vec<u8> {
    let mut out = Vec::new();
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    writeln!(out, "ply\nformat {fmt} 1.0\nelement vertex {}", rows.len()).unwrap();
    for c in columns {
        writeln!(out, "property double {c}").unwrap();
    }
    out.extend_from_slice(b"end_header\n");
    for r in rows {
        match format {
            PlyFormat::Ascii => {
                let line: Vec<String> = r.iter().map(|v| v.to_string()).collect();
                writeln!(out, "{}", line.join(" ")).unwrap();
            }
            PlyFormat::BinaryLittleEndian => {
                for v in r {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn encode_ply(cloud: &PointCloud, format: PlyFormat) -> Vec<u8> {
    let rows: Vec<Vec<f64>> = (0..cloud.len())
        .map(|i| {
            let p = cloud.positions[i];
            match &cloud.normals {
                Some(n) => vec![p.x, p.y, p.z, n[i].x, n[i].y, n[i].z],
                None => vec![p.x, p.y, p.z],
            }
        })
        .collect();
    let cols: &[&str] = if cloud.has_normals() {
        &["x", "y", "z", "nx", "ny", "nz"]
    } else {
        &["x", "y", "z"]
    };
    encode_ply_table(cols, &rows, format)
}

pub fn write_ply(path: impl AsRef<Path>, cloud: &PointCloud, format: PlyFormat) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ply(cloud, format)).map_err(|e| Error::io(path, e))
}

const SURFEL_COLUMNS: [&str; 10] = ["x", "y", "z", "nx", "ny", "nz", "radius", "confidence", "t0", "tu"];

pub fn encode_surfel_ply(surfels: &[Surfel], format: PlyFormat) -> Vec<u8> {
    let rows: Vec<Vec<f64>> = surfels
        .iter()
        .map(|s| {
            vec![
                s.position.x,
                s.position.y,
                s.position.z,
                s.normal.x,
                s.normal.y,
                s.normal.z,
                s.radius,
                s.confidence,
                s.t0,
                s.tu,
            ]
        })
        .collect();
    encode_ply_table(&SURFEL_COLUMNS, &rows, format)
}

pub fn write_surfel_ply(path: impl AsRef<Path>, surfels: &[Surfel], format: PlyFormat) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_surfel_ply(surfels, format)).map_err(|e| Error::io(path, e))
}

pub fn parse_surfel_ply(bytes: &[u8]) -> Result<Vec<Surfel>> {
    let t = parse_ply_table(bytes)?;
    let idx: Vec<usize> = SURFEL_COLUMNS
        .iter()
        .map(|c| t.column(c).ok_or_else(|| Error::MissingData(format!("surfel PLY lacks `{c}`"))))
        .collect::<Result<_>>()?;
    Ok(t.rows
        .iter()
        .map(|r| {
            let v = |k: usize| r[idx[k]];
            Surfel {
                position: Vector3::new(v(0), v(1), v(2)),
                normal: Vector3::new(v(3), v(4), v(5)),
                radius: v(6),
                confidence: v(7),
                t0: v(8),
                tu: v(9),
            }
        })
        .collect())
}

pub fn read_surfel_ply(path: impl AsRef<Path>) -> Result<Vec<Surfel>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_surfel_ply(&bytes)
}

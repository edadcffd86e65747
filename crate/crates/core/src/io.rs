//! Readers and writers for OBJ meshes, PLY point clouds, PFM float images
//! and binary PGM masks.
//!
//! Image rows are handed in and out in storage order: row 0 is the bottom
//! image row (smallest camera-frame y). PFM stores rows bottom-to-top, so
//! storage order maps straight to file order; PGM stores rows top-to-bottom
//! and is flipped on the way through.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::mesh::TriangleMesh;
use crate::pointcloud::OrientedPointCloud;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- OBJ

/// Loads an ASCII OBJ; polygons are fan-triangulated, `vn` normals kept when
/// every face corner references one.
pub fn read_obj(path: &Path) -> Result<TriangleMesh> {
    let text = String::from_utf8(read_bytes(path)?).map_err(|_| Error::format(path, "not UTF-8"))?;
    parse_obj(&text).map_err(|reason| Error::format(path, reason))
}

pub fn parse_obj(text: &str) -> std::result::Result<TriangleMesh, String> {
    let mut verts = Vec::new();
    let mut normals = Vec::new();
    let mut tris: Vec<[u32; 3]> = Vec::new();
    let mut vert_normal: Vec<Option<usize>> = Vec::new();
    let mut all_corners_have_normals = true;

    fn floats(it: std::str::SplitWhitespace<'_>, line: usize) -> std::result::Result<Vec3, String> {
        let v: Vec<f64> = it
            .take(3)
            .map(|s| s.parse::<f64>().map_err(|_| format!("line {line}: bad number {s:?}")))
            .collect::<std::result::Result<_, _>>()?;
        if v.len() != 3 {
            return Err(format!("line {line}: expected 3 coordinates"));
        }
        Ok(Vec3::new(v[0], v[1], v[2]))
    }

    fn resolve(idx: &str, count: usize, line: usize) -> std::result::Result<usize, String> {
        let i: i64 = idx.parse().map_err(|_| format!("line {line}: bad index {idx:?}"))?;
        let r = if i > 0 { i - 1 } else { count as i64 + i };
        if i == 0 || r < 0 || r as usize >= count {
            return Err(format!("line {line}: index {i} out of range"));
        }
        Ok(r as usize)
    }

    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let content = raw.split('#').next().unwrap_or("");
        let mut it = content.split_whitespace();
        match it.next() {
            Some("v") => {
                verts.push(floats(it, line)?);
                vert_normal.push(None);
            }
            Some("vn") => normals.push(floats(it, line)?),
            Some("f") => {
                let mut corners = Vec::new();
                for tok in it {
                    let mut parts = tok.split('/');
                    let vi = resolve(parts.next().unwrap_or(""), verts.len(), line)?;
                    let ni = match parts.nth(1) {
                        Some(s) if !s.is_empty() => Some(resolve(s, normals.len(), line)?),
                        _ => None,
                    };
                    match ni {
                        Some(n) => vert_normal[vi] = Some(n),
                        None => all_corners_have_normals = false,
                    }
                    corners.push(vi as u32);
                }
                if corners.len() < 3 {
                    return Err(format!("line {line}: face with fewer than 3 vertices"));
                }
                for k in 1..corners.len() - 1 {
                    tris.push([corners[0], corners[k], corners[k + 1]]);
                }
            }
            _ => {}
        }
    }
    let vn = if all_corners_have_normals && !normals.is_empty() && vert_normal.iter().all(|n| n.is_some()) {
        Some(vert_normal.iter().map(|n| normals[n.unwrap()]).collect())
    } else {
        None
    };
    TriangleMesh::with_normals(verts, tris, vn).map_err(|e| e.to_string())
}

pub fn write_obj(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    let mut w = create(path)?;
    let res = (|| -> std::io::Result<()> {
        for v in mesh.vertices() {
            writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
        }
        if let Some(ns) = mesh.vertex_normals() {
            for n in ns {
                writeln!(w, "vn {} {} {}", n.x, n.y, n.z)?;
            }
            for t in mesh.triangles() {
                let (a, b, c) = (t[0] + 1, t[1] + 1, t[2] + 1);
                writeln!(w, "f {a}//{a} {b}//{b} {c}//{c}")?;
            }
        } else {
            for t in mesh.triangles() {
                writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
            }
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- PLY

/// Binary little-endian PLY with float32 `x y z nx ny nz`.
pub fn write_ply(path: &Path, cloud: &OrientedPointCloud) -> Result<()> {
    let mut w = create(path)?;
    let res = (|| -> std::io::Result<()> {
        write!(
            w,
            "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
             property float x\nproperty float y\nproperty float z\n\
             property float nx\nproperty float ny\nproperty float nz\nend_header\n",
            cloud.len()
        )?;
        for (p, n) in cloud.points().iter().zip(cloud.normals()) {
            for c in [p.x, p.y, p.z, n.x, n.y, n.z] {
                w.write_all(&(c as f32).to_le_bytes())?;
            }
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum PlyScalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyScalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8], big_endian: bool) -> f64 {
        macro_rules! get {
            ($t:ty, $n:expr) => {{
                let arr: [u8; $n] = b[..$n].try_into().unwrap();
                (if big_endian { <$t>::from_be_bytes(arr) } else { <$t>::from_le_bytes(arr) }) as f64
            }};
        }
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => get!(i16, 2),
            Self::U16 => get!(u16, 2),
            Self::I32 => get!(i32, 4),
            Self::U32 => get!(u32, 4),
            Self::F32 => get!(f32, 4),
            Self::F64 => get!(f64, 8),
        }
    }
}

/// Reads the vertex element of a PLY file (ascii or binary). Normals default
/// to zero when absent.
pub fn read_ply(path: &Path) -> Result<OrientedPointCloud> {
    let bytes = read_bytes(path)?;
    parse_ply(&bytes).map_err(|r| Error::format(path, r))
}

pub fn parse_ply(bytes: &[u8]) -> std::result::Result<OrientedPointCloud, String> {
    const END: &[u8] = b"end_header\n";
    let header_end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or("missing end_header")?
        + END.len();
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| "header not UTF-8")?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err("missing ply magic".into());
    }
    let mut format = None;
    // (name, count, properties); list properties are recorded as None.
    let mut elements: Vec<(String, usize, Vec<(String, Option<PlyScalar>, Option<(PlyScalar, PlyScalar)>)>)> = Vec::new();
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", f, _] => format = Some(f.to_string()),
            ["element", name, count] => elements.push((
                name.to_string(),
                count.parse().map_err(|_| format!("bad element count {count}"))?,
                Vec::new(),
            )),
            ["property", "list", ct, it, name] => {
                let el = elements.last_mut().ok_or("property before element")?;
                let ct = PlyScalar::parse(ct).ok_or("bad list count type")?;
                let it = PlyScalar::parse(it).ok_or("bad list item type")?;
                el.2.push((name.to_string(), None, Some((ct, it))));
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or("property before element")?;
                let ty = PlyScalar::parse(ty).ok_or_else(|| format!("unknown property type {ty}"))?;
                el.2.push((name.to_string(), Some(ty), None));
            }
            _ => {}
        }
    }
    let format = format.ok_or("missing format line")?;
    let (vcount, props) = {
        let v = elements
            .iter()
            .find(|e| e.0 == "vertex")
            .ok_or("no vertex element")?;
        (v.1, v.2.clone())
    };
    let col = |name: &str| props.iter().position(|p| p.0 == name);
    let (ix, iy, iz) = (
        col("x").ok_or("missing x")?,
        col("y").ok_or("missing y")?,
        col("z").ok_or("missing z")?,
    );
    let normal_cols = match (col("nx"), col("ny"), col("nz")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };
    let mut cloud = OrientedPointCloud::default();
    let mut row = vec![0.0f64; props.len()];
    let mut emit = |row: &[f64]| {
        let p = Vec3::new(row[ix], row[iy], row[iz]);
        let n = normal_cols.map_or(Vec3::zeros(), |(a, b, c)| Vec3::new(row[a], row[b], row[c]));
        cloud.push(p, n);
    };
    match format.as_str() {
        "ascii" => {
            let body = std::str::from_utf8(&bytes[header_end..]).map_err(|_| "body not UTF-8")?;
            let mut tokens = body.split_whitespace();
            // Elements are laid out in declaration order; skip any before "vertex".
            for (name, count, eprops) in &elements {
                for _ in 0..*count {
                    for (k, (_, scalar, list)) in eprops.iter().enumerate() {
                        if scalar.is_some() {
                            let t = tokens.next().ok_or("truncated ascii body")?;
                            let v: f64 = t.parse().map_err(|_| format!("bad value {t}"))?;
                            if name == "vertex" {
                                row[k] = v;
                            }
                        } else if list.is_some() {
                            let n: usize = tokens
                                .next()
                                .ok_or("truncated ascii body")?
                                .parse()
                                .map_err(|_| "bad list count")?;
                            for _ in 0..n {
                                tokens.next().ok_or("truncated ascii body")?;
                            }
                        }
                    }
                    if name == "vertex" {
                        emit(&row);
                    }
                }
            }
        }
        "binary_little_endian" | "binary_big_endian" => {
            let be = format == "binary_big_endian";
            let mut off = header_end;
            for (name, count, eprops) in &elements {
                for _ in 0..*count {
                    for (k, (_, scalar, list)) in eprops.iter().enumerate() {
                        if let Some(s) = scalar {
                            let end = off + s.size();
                            let b = bytes.get(off..end).ok_or("truncated binary body")?;
                            if name == "vertex" {
                                row[k] = s.read(b, be);
                            }
                            off = end;
                        } else if let Some((ct, it)) = list {
                            let b = bytes.get(off..off + ct.size()).ok_or("truncated binary body")?;
                            let n = ct.read(b, be) as usize;
                            off += ct.size() + n * it.size();
                        }
                    }
                    if name == "vertex" {
                        emit(&row);
                    }
                }
            }
        }
        other => return Err(format!("unsupported PLY format {other}")),
    }
    if cloud.len() != vcount {
        return Err("vertex count mismatch".into());
    }
    Ok(cloud)
}

// ---------------------------------------------------------------- PFM / PGM

#[derive(Clone, Debug, PartialEq)]
pub struct RawImage<T> {
    pub width: usize,
    pub height: usize,
    /// Row-major, storage order (row 0 = bottom).
    pub data: Vec<T>,
}

fn header_tokens(bytes: &[u8], count: usize) -> std::result::Result<(Vec<String>, usize), String> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err("truncated header".into());
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err("truncated header".into());
    }
    Ok((tokens, i + 1))
}

fn dims(w: &str, h: &str) -> std::result::Result<(usize, usize), String> {
    let w: usize = w.parse().map_err(|_| format!("bad width {w:?}"))?;
    let h: usize = h.parse().map_err(|_| format!("bad height {h:?}"))?;
    if w == 0 || h == 0 {
        return Err("zero image dimension".into());
    }
    Ok((w, h))
}

/// Reads a PFM; `channels` must be 1 (`Pf`) or 3 (`PF`).
pub fn read_pfm(path: &Path, channels: usize) -> Result<RawImage<f32>> {
    let bytes = read_bytes(path)?;
    parse_pfm(&bytes, channels).map_err(|r| Error::format(path, r))
}

pub fn parse_pfm(bytes: &[u8], channels: usize) -> std::result::Result<RawImage<f32>, String> {
    let (tok, start) = header_tokens(bytes, 4)?;
    let magic = match channels {
        1 => "Pf",
        3 => "PF",
        _ => return Err("unsupported channel count".into()),
    };
    if tok[0] != magic {
        return Err(format!("expected magic {magic}, found {:?}", tok[0]));
    }
    let (w, h) = dims(&tok[1], &tok[2])?;
    let scale: f64 = tok[3].parse().map_err(|_| format!("bad scale {:?}", tok[3]))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err("scale must be non-zero".into());
    }
    let big_endian = scale > 0.0;
    let n = w * h * channels;
    let body = &bytes[start..];
    if body.len() != n * 4 {
        return Err(format!("expected {} data bytes, found {}", n * 4, body.len()));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| {
            let a: [u8; 4] = c.try_into().unwrap();
            if big_endian {
                f32::from_be_bytes(a)
            } else {
                f32::from_le_bytes(a)
            }
        })
        .collect();
    Ok(RawImage { width: w, height: h, data })
}

/// Writes little-endian PFM with scale -1.0.
pub fn write_pfm(path: &Path, img: &RawImage<f32>, channels: usize) -> Result<()> {
    let bytes = encode_pfm(img, channels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_pfm(img: &RawImage<f32>, channels: usize) -> Vec<u8> {
    let magic = if channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{magic}\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    out.reserve(img.data.len() * 4);
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Reads a binary P5 PGM with maxval 255; returns rows in storage order.
pub fn read_pgm(path: &Path) -> Result<RawImage<u8>> {
    let bytes = read_bytes(path)?;
    parse_pgm(&bytes).map_err(|r| Error::format(path, r))
}

pub fn parse_pgm(bytes: &[u8]) -> std::result::Result<RawImage<u8>, String> {
    let (tok, start) = header_tokens(bytes, 4)?;
    if tok[0] != "P5" {
        return Err(format!("expected magic P5, found {:?}", tok[0]));
    }
    let (w, h) = dims(&tok[1], &tok[2])?;
    if tok[3] != "255" {
        return Err(format!("expected maxval 255, found {:?}", tok[3]));
    }
    let body = &bytes[start..];
    if body.len() != w * h {
        return Err(format!("expected {} data bytes, found {}", w * h, body.len()));
    }
    let mut data = vec![0u8; w * h];
    for (file_row, chunk) in body.chunks_exact(w).enumerate() {
        let row = h - 1 - file_row;
        data[row * w..(row + 1) * w].copy_from_slice(chunk);
    }
    Ok(RawImage { width: w, height: h, data })
}

pub fn write_pgm(path: &Path, img: &RawImage<u8>) -> Result<()> {
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

pub fn encode_pgm(img: &RawImage<u8>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    for row in (0..img.height).rev() {
        out.extend_from_slice(&img.data[row * img.width..(row + 1) * img.width]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn obj_fan_triangulates_quads_and_reads_normals() {
        let text = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1 4//1\n";
        let m = parse_obj(text).unwrap();
        assert_eq!(m.triangles(), &[[0, 1, 2], [0, 2, 3]]);
        assert_eq!(m.vertex_normals().unwrap()[2], Vec3::z());
    }

    #[test]
    fn obj_rejects_bad_index() {
        assert!(parse_obj("v 0 0 0\nf 1 2 3\n").is_err());
    }

    #[test]
    fn ply_binary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ply");
        let cloud = OrientedPointCloud::new(
            vec![Vec3::new(0.5, -0.25, 1.0), Vec3::new(0.125, 0.0, -1.0)],
            vec![Vec3::z(), -Vec3::x()],
        );
        write_ply(&path, &cloud).unwrap();
        assert_eq!(read_ply(&path).unwrap(), cloud);
    }

    #[test]
    fn ply_ascii_with_faces() {
        let text = b"ply\nformat ascii 1.0\nelement vertex 3\nproperty double x\nproperty double y\nproperty double z\n\
element face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n";
        let c = parse_ply(text).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.points()[1], Vec3::x());
    }

    #[test]
    fn pfm_layout() {
        let img = RawImage { width: 2, height: 1, data: vec![1.0f32, -2.5] };
        let bytes = encode_pfm(&img, 1);
        assert!(bytes.starts_with(b"Pf\n2 1\n-1.0\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &(-2.5f32).to_le_bytes());
        assert_eq!(parse_pfm(&bytes, 1).unwrap(), img);
        assert!(parse_pfm(&bytes, 3).is_err());
        assert!(parse_pfm(&bytes[..bytes.len() - 1], 1).is_err());
    }

    #[test]
    fn pgm_flips_rows() {
        let img = RawImage { width: 2, height: 2, data: vec![0u8, 255, 255, 0] };
        let bytes = encode_pgm(&img);
        // Top row (storage row 1) first.
        assert_eq!(&bytes[bytes.len() - 4..], &[255, 0, 0, 255]);
        assert_eq!(parse_pgm(&bytes).unwrap(), img);
    }
}

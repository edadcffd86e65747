//! Per-view depth / normal / foreground maps and their directory format:
//! `rig.json`, `depth_{v}.pfm`, `normal_{v}.pfm`, `mask_{v}.pgm`.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::io::{self, RawImage};
use crate::views::ViewRig;

pub const BACKGROUND_NORMAL: [f32; 3] = [0.0, 0.0, 1.0];
const NORMAL_TOL: f64 = 1e-3;

/// Row-major image; `(i, j)` is (column, row) with row 0 at the bottom.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Grid {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "grid data has {} entries, expected {}",
                data.len(),
                width * height
            )));
        }
        Ok(Grid { width, height, data })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.width + i
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> &T {
        &self.data[j * self.width + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        let w = self.width;
        self.data[j * w + i] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

pub type DepthMap = Grid<f32>;
pub type NormalMap = Grid<[f32; 3]>;
pub type ForegroundMask = Grid<bool>;

impl ForegroundMask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&f| f).count()
    }

    #[inline]
    pub fn is_fg(&self, i: usize, j: usize) -> bool {
        self.data[j * self.width + i]
    }

    /// Foreground iff probability is strictly above one half.
    pub fn from_probability(prob: &Grid<f32>) -> ForegroundMask {
        Grid {
            width: prob.width,
            height: prob.height,
            data: prob.data.iter().map(|&p| p > 0.5).collect(),
        }
    }
}

#[inline]
pub fn normal_vec(n: &[f32; 3]) -> Vec3 {
    Vec3::new(n[0] as f64, n[1] as f64, n[2] as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewMaps {
    pub depth: DepthMap,
    /// Camera-frame normals.
    pub normal: NormalMap,
    pub mask: ForegroundMask,
}

impl ViewMaps {
    pub fn background(width: usize, height: usize) -> Self {
        ViewMaps {
            depth: Grid::filled(width, height, 0.0),
            normal: Grid::filled(width, height, BACKGROUND_NORMAL),
            mask: Grid::filled(width, height, false),
        }
    }

    /// Marks a pixel background and resets its placeholder values.
    pub fn clear_pixel(&mut self, i: usize, j: usize) {
        self.mask.set(i, j, false);
        self.depth.set(i, j, 0.0);
        self.normal.set(i, j, BACKGROUND_NORMAL);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapSet {
    pub rig: ViewRig,
    pub views: Vec<ViewMaps>,
}

impl MapSet {
    pub fn background(rig: ViewRig) -> MapSet {
        let views = (0..rig.len())
            .map(|_| ViewMaps::background(rig.width(), rig.height()))
            .collect();
        MapSet { rig, views }
    }

    pub fn foreground_count(&self) -> usize {
        self.views.iter().map(|v| v.mask.count()).sum()
    }

    /// Bitwise equality, treating NaN payloads exactly.
    pub fn bitwise_eq(&self, other: &MapSet) -> bool {
        self.rig == other.rig
            && self.views.len() == other.views.len()
            && self.views.iter().zip(&other.views).all(|(a, b)| {
                a.mask == b.mask
                    && a.depth.data.iter().map(|x| x.to_bits()).eq(b.depth.data.iter().map(|x| x.to_bits()))
                    && a.normal.data.iter().flatten().map(|x| x.to_bits()).eq(b.normal.data.iter().flatten().map(|x| x.to_bits()))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    ViewCount,
    Dimensions,
    NonFiniteDepth,
    DepthRange,
    NonFiniteNormal,
    NormalLength,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub view: usize,
    pub pixel: Option<(usize, usize)>,
    pub rule: Rule,
    pub value: f64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "view {}", self.view)?;
        if let Some((i, j)) = self.pixel {
            write!(f, " pixel ({i}, {j})")?;
        }
        write!(f, ": {:?} (value {})", self.rule, self.value)
    }
}

/// Every invariant breach in `m`; empty means valid.
pub fn validate_mapset(m: &MapSet) -> Vec<Violation> {
    let mut out = Vec::new();
    if m.views.len() != m.rig.len() {
        out.push(Violation {
            view: 0,
            pixel: None,
            rule: Rule::ViewCount,
            value: m.views.len() as f64,
        });
    }
    let (w, h) = (m.rig.width(), m.rig.height());
    for (v, maps) in m.views.iter().enumerate() {
        let dims_ok = [
            (maps.depth.width, maps.depth.height),
            (maps.normal.width, maps.normal.height),
            (maps.mask.width, maps.mask.height),
        ]
        .iter()
        .all(|&d| d == (w, h));
        if !dims_ok {
            out.push(Violation {
                view: v,
                pixel: None,
                rule: Rule::Dimensions,
                value: 0.0,
            });
            continue;
        }
        for j in 0..h {
            for i in 0..w {
                let d = *maps.depth.get(i, j);
                let px = Some((i, j));
                if !d.is_finite() {
                    out.push(Violation { view: v, pixel: px, rule: Rule::NonFiniteDepth, value: d as f64 });
                    continue;
                }
                if !maps.mask.is_fg(i, j) {
                    continue;
                }
                if !(-1.0..=1.0).contains(&d) {
                    out.push(Violation { view: v, pixel: px, rule: Rule::DepthRange, value: d as f64 });
                }
                let n = normal_vec(maps.normal.get(i, j));
                if !n.iter().all(|c| c.is_finite()) {
                    out.push(Violation { view: v, pixel: px, rule: Rule::NonFiniteNormal, value: f64::NAN });
                } else if (n.norm() - 1.0).abs() > NORMAL_TOL {
                    out.push(Violation { view: v, pixel: px, rule: Rule::NormalLength, value: n.norm() });
                }
            }
        }
    }
    out
}

pub fn depth_path(dir: &Path, v: usize) -> PathBuf {
    dir.join(format!("depth_{v}.pfm"))
}

pub fn normal_path(dir: &Path, v: usize) -> PathBuf {
    dir.join(format!("normal_{v}.pfm"))
}

pub fn mask_path(dir: &Path, v: usize) -> PathBuf {
    dir.join(format!("mask_{v}.pgm"))
}

pub fn write_mapset(dir: &Path, m: &MapSet) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    m.rig.write_manifest(&dir.join("rig.json"))?;
    for (v, maps) in m.views.iter().enumerate() {
        let (w, h) = (maps.depth.width, maps.depth.height);
        io::write_pfm(
            &depth_path(dir, v),
            &RawImage { width: w, height: h, data: maps.depth.data.clone() },
            1,
        )?;
        io::write_pfm(
            &normal_path(dir, v),
            &RawImage { width: w, height: h, data: maps.normal.data.iter().flatten().copied().collect() },
            3,
        )?;
        io::write_pgm(
            &mask_path(dir, v),
            &RawImage { width: w, height: h, data: maps.mask.data.iter().map(|&f| if f { 255 } else { 0 }).collect() },
        )?;
    }
    Ok(())
}

fn with_view<T>(r: Result<T>, view: usize) -> Result<T> {
    r.map_err(|e| match e {
        Error::MissingFile { path, .. } => Error::MissingFile { path, view: Some(view) },
        other => other,
    })
}

/// Loads a map directory and validates it. Mask bytes above 127 are
/// foreground (probability strictly above one half).
pub fn read_mapset(dir: &Path) -> Result<MapSet> {
    let rig = ViewRig::read_manifest(&dir.join("rig.json"))?;
    let (w, h) = (rig.width(), rig.height());
    let mut views = Vec::with_capacity(rig.len());
    for v in 0..rig.len() {
        let check = |map: &'static str, iw: usize, ih: usize| -> Result<()> {
            if (iw, ih) != (w, h) {
                return Err(Error::DimensionMismatch {
                    view: v,
                    map,
                    expected_w: w,
                    expected_h: h,
                    found_w: iw,
                    found_h: ih,
                });
            }
            Ok(())
        };
        let d = with_view(io::read_pfm(&depth_path(dir, v), 1), v)?;
        check("depth", d.width, d.height)?;
        let n = with_view(io::read_pfm(&normal_path(dir, v), 3), v)?;
        check("normal", n.width, n.height)?;
        let mk = with_view(io::read_pgm(&mask_path(dir, v)), v)?;
        check("mask", mk.width, mk.height)?;
        views.push(ViewMaps {
            depth: Grid { width: w, height: h, data: d.data },
            normal: Grid {
                width: w,
                height: h,
                data: n.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            },
            mask: Grid { width: w, height: h, data: mk.data.iter().map(|&b| b > 127).collect() },
        });
    }
    let m = MapSet { rig, views };
    let violations = validate_mapset(&m);
    if let Some(first) = violations.first() {
        return Err(Error::Validation {
            count: violations.len(),
            first: first.to_string(),
        });
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_set() -> MapSet {
        let rig = ViewRig::icosahedron(8, 6).unwrap();
        let mut m = MapSet::background(rig);
        let view = &mut m.views[2];
        view.mask.set(3, 2, true);
        view.depth.set(3, 2, 0.25);
        view.normal.set(3, 2, [0.6, 0.0, 0.8]);
        m
    }

    #[test]
    fn write_then_read_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let m = small_set();
        write_mapset(dir.path(), &m).unwrap();
        let back = read_mapset(dir.path()).unwrap();
        assert!(back.bitwise_eq(&m));
        // Rewriting produces identical bytes.
        let dir2 = tempfile::tempdir().unwrap();
        write_mapset(dir2.path(), &back).unwrap();
        for name in ["rig.json", "depth_2.pfm", "normal_2.pfm", "mask_2.pgm"] {
            assert_eq!(
                std::fs::read(dir.path().join(name)).unwrap(),
                std::fs::read(dir2.path().join(name)).unwrap()
            );
        }
    }

    #[test]
    fn missing_mask_names_view() {
        let dir = tempfile::tempdir().unwrap();
        write_mapset(dir.path(), &small_set()).unwrap();
        std::fs::remove_file(mask_path(dir.path(), 3)).unwrap();
        match read_mapset(dir.path()) {
            Err(Error::MissingFile { view: Some(3), path }) => assert!(path.ends_with("mask_3.pgm")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nan_depth_on_foreground_is_pinpointed() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = small_set();
        m.views[2].depth.set(3, 2, f32::NAN);
        write_mapset(dir.path(), &m).unwrap();
        match read_mapset(dir.path()) {
            Err(Error::Validation { first, .. }) => {
                assert!(first.contains("view 2") && first.contains("(3, 2)"), "{first}")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_and_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        write_mapset(dir.path(), &small_set()).unwrap();
        io::write_pfm(&depth_path(dir.path(), 1), &RawImage { width: 4, height: 4, data: vec![0.0; 16] }, 1).unwrap();
        assert!(matches!(read_mapset(dir.path()), Err(Error::DimensionMismatch { view: 1, .. })));
        std::fs::write(depth_path(dir.path(), 1), b"P6\n8 6\n").unwrap();
        match read_mapset(dir.path()) {
            Err(Error::Format { path, .. }) => assert!(path.ends_with("depth_1.pfm")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validation_rules() {
        let mut m = small_set();
        assert!(validate_mapset(&m).is_empty());
        m.views[2].normal.set(3, 2, [0.5, 0.0, 0.0]);
        let v = validate_mapset(&m);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::NormalLength);
        m.views[2].normal.set(3, 2, [0.0, 0.0, 1.0]);
        m.views[2].depth.set(3, 2, 1.2);
        let v = validate_mapset(&m);
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].rule, v[0].pixel), (Rule::DepthRange, Some((3, 2))));
    }

    #[test]
    fn half_probability_is_background() {
        let p = Grid::from_vec(3, 1, vec![0.5f32, 0.5001, 0.2]).unwrap();
        let m = ForegroundMask::from_probability(&p);
        assert_eq!(m.data(), &[false, true, false]);
    }
}

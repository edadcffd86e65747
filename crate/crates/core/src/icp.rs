//! Point-to-point ICP and round-robin alignment of the per-view point sets.
//!
//! Correspondences are closest points on the target surface, not on its raw
//! samples: where target points come from a pixel grid, neighboring pixels
//! are joined into triangles. Matching against raw samples lets two sampling
//! lattices lock onto each other and drags oracle views off identity.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, RigidTransform, Vec3};
use crate::kdtree::KdTree;
use crate::maps::MapSet;
use crate::pointgen::{PointSet, ViewPoint};

/// Round-robin passes of [`align_rig`] unless configured otherwise.
pub const DEFAULT_SWEEPS: usize = 3;

/// cos 30°: the widest source-normal to target-triangle angle that matches.
const MIN_NORMAL_COSINE: f64 = 0.866_025_403_784_438_6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcpParams {
    pub max_iterations: usize,
    pub rejection_distance: f64,
    /// Minimum RMS improvement for an iteration to count as progress.
    pub convergence: f64,
}

impl IcpParams {
    /// 30 iterations, rejection at four pixels, RMS threshold 1e-5. The
    /// threshold sits above the 1-3e-6 per-step gains that sampling alone
    /// produces on mutually consistent views.
    pub fn for_kappa(kappa: f64) -> Self {
        IcpParams {
            max_iterations: 30,
            rejection_distance: 4.0 * kappa,
            convergence: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || !(self.rejection_distance > 0.0) || !(self.convergence > 0.0) {
            return Err(Error::InvalidArgument("ICP parameters must all be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcpResult {
    /// Maps source points onto the target.
    pub transform: RigidTransform,
    pub rms: f64,
    /// RMS after each accepted iteration.
    pub rms_history: Vec<f64>,
    pub correspondences: usize,
    pub iterations: usize,
}

/// Closed-form least-squares rigid fit `dst ≈ R src + t` (cross-covariance
/// SVD with a reflection guard).
pub fn fit_rigid(src: &[Vec3], dst: &[Vec3]) -> RigidTransform {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vec3>() / n;
    let cd = dst.iter().sum::<Vec3>() / n;
    let mut h = Mat3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd u");
    let v = svd.v_t.expect("svd v_t").transpose();
    let mut corr = Mat3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        corr[(2, 2)] = -1.0;
    }
    let r = v * corr * u.transpose();
    RigidTransform {
        rotation: r,
        translation: cd - r * cs,
    }
}

fn check_spread(points: &[Vec3]) -> Result<()> {
    if points.len() < 3 {
        return Err(Error::Degenerate(format!("{} points, need at least 3", points.len())));
    }
    let c = points.iter().sum::<Vec3>() / points.len() as f64;
    let mut cov = Mat3::zeros();
    for p in points {
        cov += (p - c) * (p - c).transpose();
    }
    let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[1] > 1e-12 * ev[0].max(f64::MIN_POSITIVE)) {
        return Err(Error::Degenerate("source points are collinear".into()));
    }
    Ok(())
}

fn rms_of(t: &RigidTransform, src: &[Vec3], dst: &[Vec3]) -> f64 {
    let s: f64 = src.iter().zip(dst).map(|(s, d)| (t.apply(s) - d).norm_squared()).sum();
    (s / src.len() as f64).sqrt()
}

/// Triangles joining 4-neighboring pixels of one point set, as local point
/// indices. Triangles with an edge longer than `max_edge` are skipped so
/// depth discontinuities stay open. Sets whose points do not have distinct
/// pixels are not triangulated.
pub fn grid_triangles(points: &[ViewPoint], max_edge: f64) -> Vec<[u32; 3]> {
    let mut at: HashMap<(usize, usize, usize), u32> = HashMap::with_capacity(points.len());
    for (k, p) in points.iter().enumerate() {
        if at.insert((p.view, p.pixel.0, p.pixel.1), k as u32).is_some() {
            return Vec::new();
        }
    }
    let short = |a: u32, b: u32| (points[a as usize].position - points[b as usize].position).norm() <= max_edge;
    let mut tris = Vec::new();
    let mut push = |t: [u32; 3]| {
        if short(t[0], t[1]) && short(t[1], t[2]) && short(t[2], t[0]) {
            tris.push(t);
        }
    };
    for p in points {
        let (v, i, j) = (p.view, p.pixel.0, p.pixel.1);
        let q = [
            at.get(&(v, i, j)).copied(),
            at.get(&(v, i + 1, j)).copied(),
            at.get(&(v, i, j + 1)).copied(),
            at.get(&(v, i + 1, j + 1)).copied(),
        ];
        match q {
            [Some(a), Some(b), Some(c), Some(d)] => {
                let pos = |k: u32| points[k as usize].position;
                // Split along the shorter diagonal.
                if (pos(a) - pos(d)).norm() <= (pos(b) - pos(c)).norm() {
                    push([a, b, d]);
                    push([a, d, c]);
                } else {
                    push([a, b, c]);
                    push([b, d, c]);
                }
            }
            [Some(a), Some(b), Some(c), None] => push([a, b, c]),
            [Some(a), Some(b), None, Some(d)] => push([a, b, d]),
            [Some(a), None, Some(c), Some(d)] => push([a, d, c]),
            [None, Some(b), Some(c), Some(d)] => push([b, d, c]),
            _ => {}
        }
    }
    tris
}

/// Samples of one point set plus the triangles incident to each sample.
#[derive(Clone, Debug)]
pub struct GridSurface {
    tree: KdTree,
    triangles: Vec<[u32; 3]>,
    fan_start: Vec<u32>,
    fan: Vec<u32>,
}

impl GridSurface {
    pub fn new(points: &[Vec3], triangles: Vec<[u32; 3]>) -> Self {
        let mut start = vec![0u32; points.len() + 1];
        for t in &triangles {
            for &k in t {
                start[k as usize + 1] += 1;
            }
        }
        for k in 0..points.len() {
            start[k + 1] += start[k];
        }
        let mut fill = start.clone();
        let mut fan = vec![0u32; start[points.len()] as usize];
        for (ti, t) in triangles.iter().enumerate() {
            for &k in t {
                fan[fill[k as usize] as usize] = ti as u32;
                fill[k as usize] += 1;
            }
        }
        GridSurface {
            tree: KdTree::new(points),
            triangles,
            fan_start: start,
            fan,
        }
    }

    pub fn from_set(set: &PointSet, max_edge: f64) -> Self {
        Self::new(&set.positions(), grid_triangles(&set.points, max_edge))
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    /// Nearest sample within `limit` and, if one exists, the closest
    /// orthogonal foot point on the triangles around it. Feet outside their
    /// triangle are boundary matches and are skipped, as are triangles whose
    /// normal is incompatible with `normal`.
    fn closest(&self, q: &Vec3, normal: Option<&Vec3>, limit: f64) -> Option<((Vec3, f64), Option<(Vec3, f64)>)> {
        let pts = self.tree.points();
        let (k, dk) = self.tree.nearest_within(q, limit)?;
        let mut foot: Option<(Vec3, f64)> = None;
        for &t in &self.fan[self.fan_start[k] as usize..self.fan_start[k + 1] as usize] {
            let [a, b, c] = self.triangles[t as usize].map(|i| pts[i as usize]);
            if let Some(n) = normal {
                let face = (b - a).cross(&(c - a));
                if face.dot(n).abs() < MIN_NORMAL_COSINE * face.norm() {
                    continue;
                }
            }
            if let Some(p) = project_into_triangle(q, &a, &b, &c) {
                let d = (p - q).norm();
                if foot.is_none_or(|(_, bd)| d < bd) {
                    foot = Some((p, d));
                }
            }
        }
        Some(((pts[k], dk), foot))
    }
}

/// Orthogonal projection of `q` onto the plane of `abc` if it falls inside
/// the triangle.
fn project_into_triangle(q: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Option<Vec3> {
    let (e1, e2) = (b - a, c - a);
    let n = e1.cross(&e2);
    let n2 = n.norm_squared();
    if n2 == 0.0 {
        return None;
    }
    let w = q - a;
    let u = n.dot(&w.cross(&e2)) / n2;
    let v = n.dot(&e1.cross(&w)) / n2;
    const EPS: f64 = 1e-9;
    (u >= -EPS && v >= -EPS && u + v <= 1.0 + EPS).then(|| a + e1 * u + e2 * v)
}

/// What an ICP source is matched against: surfaces placed by rigid poses.
/// Each surface is queried on its own so the nearest sample of one view
/// cannot hide a closer triangle of another.
#[derive(Clone, Debug)]
pub struct IcpTarget<'a> {
    parts: Vec<(&'a GridSurface, RigidTransform, RigidTransform)>,
}

impl<'a> IcpTarget<'a> {
    pub fn new(parts: impl IntoIterator<Item = (&'a GridSurface, RigidTransform)>) -> Self {
        IcpTarget {
            parts: parts.into_iter().map(|(s, t)| (s, t, t.inverse())).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.parts.iter().all(|(s, _, _)| s.is_empty())
    }

    /// Closest compatible target surface point within `max_dist` of `q`;
    /// where no surface lies orthogonally below `q` (boundaries, creases),
    /// the nearest sample. `normal` is the unit source normal, if known.
    pub fn closest_within(&self, q: &Vec3, normal: Option<&Vec3>, max_dist: f64) -> Option<Vec3> {
        let mut best_foot: Option<(Vec3, f64)> = None;
        let mut best_sample: Option<(Vec3, f64)> = None;
        for (surface, pose, inverse) in &self.parts {
            let local_normal = normal.map(|n| inverse.apply_vector(n));
            // The surface can be closer than its samples by up to an edge.
            let Some((sample, foot)) = surface.closest(&inverse.apply(q), local_normal.as_ref(), 2.0 * max_dist) else {
                continue;
            };
            for (slot, cand) in [(&mut best_sample, Some(sample)), (&mut best_foot, foot)] {
                if let Some((p, d)) = cand {
                    if d <= max_dist && slot.is_none_or(|(_, bd)| d < bd) {
                        *slot = Some((pose.apply(&p), d));
                    }
                }
            }
        }
        best_foot.or(best_sample).map(|(p, _)| p)
    }
}

pub fn icp(source: &PointSet, target: &PointSet, params: &IcpParams) -> Result<IcpResult> {
    if target.len() < 3 {
        return Err(Error::Degenerate("target has fewer than 3 points".into()));
    }
    let surface = GridSurface::from_set(target, params.rejection_distance);
    let normals = unit_normals(source);
    icp_points(&source.positions(), Some(&normals), &IcpTarget::new([(&surface, RigidTransform::identity())]), params)
}

/// Source normals for the compatibility test; unusable ones become zero,
/// which disables the test for that point.
fn unit_normals(set: &PointSet) -> Vec<Vec3> {
    set.points
        .iter()
        .map(|p| p.normal.try_normalize(1e-12).unwrap_or_else(Vec3::zeros))
        .collect()
}

/// ICP of `source` against a prebuilt target. With `normals`, a point only
/// matches target triangles within 30° of its normal, so creases that the
/// target triangulation bevels do not pull the fit.
///
/// An iteration is accepted only if its fit improves the RMS by at least
/// `params.convergence` and does not raise it above the previous accepted
/// value; otherwise the current estimate is returned.
pub fn icp_points(
    source: &[Vec3],
    normals: Option<&[Vec3]>,
    target: &IcpTarget<'_>,
    params: &IcpParams,
) -> Result<IcpResult> {
    params.validate()?;
    check_spread(source)?;
    if normals.is_some_and(|n| n.len() != source.len()) {
        return Err(Error::InvalidArgument("one normal per source point required".into()));
    }
    let mut transform = RigidTransform::identity();
    let mut history = Vec::new();
    let mut last_pairs = 0;
    let mut rms = f64::NAN;
    let mut iterations = 0;
    for _ in 0..params.max_iterations {
        iterations += 1;
        let matches: Vec<Option<Vec3>> = (0..source.len())
            .into_par_iter()
            .map(|k| {
                let n = normals.map(|n| transform.apply_vector(&n[k])).filter(|n| n.norm_squared() > 0.0);
                target.closest_within(&transform.apply(&source[k]), n.as_ref(), params.rejection_distance)
            })
            .collect();
        let (src, dst): (Vec<Vec3>, Vec<Vec3>) = source
            .iter()
            .zip(&matches)
            .filter_map(|(s, m)| m.map(|t| (*s, t)))
            .unzip();
        last_pairs = src.len();
        if src.len() < 3 {
            break;
        }
        let before = rms_of(&transform, &src, &dst);
        if history.is_empty() {
            rms = before;
        }
        let candidate = fit_rigid(&src, &dst);
        let after = rms_of(&candidate, &src, &dst);
        if before - after < params.convergence {
            rms = before.min(rms);
            break;
        }
        if let Some(&prev) = history.last() {
            if after > prev {
                break;
            }
        }
        transform = candidate;
        rms = after;
        history.push(after);
    }
    if last_pairs == 0 {
        rms = 0.0;
    }
    Ok(IcpResult {
        transform,
        rms,
        rms_history: history,
        correspondences: last_pairs,
        iterations,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    /// Object-space correction per view; the reference view stays identity.
    pub transforms: Vec<RigidTransform>,
    pub rms: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Each-vs-union round-robin alignment with the first non-empty view fixed.
pub fn align_rig(sets: &[PointSet], params: &IcpParams, sweeps: usize) -> Result<Alignment> {
    params.validate()?;
    let n = sets.len();
    let mut transforms = vec![RigidTransform::identity(); n];
    let mut rms = vec![0.0; n];
    let mut warnings = Vec::new();
    let nonempty: Vec<usize> = (0..n).filter(|&v| !sets[v].is_empty()).collect();
    if nonempty.len() < 2 {
        warnings.push("fewer than two non-empty views; nothing to align".into());
        return Ok(Alignment { transforms, rms, warnings });
    }
    let reference = nonempty[0];
    let surfaces: Vec<GridSurface> = sets.iter().map(|s| GridSurface::from_set(s, params.rejection_distance)).collect();
    let source: Vec<Vec<Vec3>> = sets.iter().map(|s| s.positions()).collect();
    let normals: Vec<Vec<Vec3>> = sets.iter().map(unit_normals).collect();
    for _ in 0..sweeps {
        for &v in nonempty.iter().filter(|&&v| v != reference) {
            let target = IcpTarget::new((0..n).filter(|&u| u != v).map(|u| (&surfaces[u], transforms[u])));
            let t = transforms[v];
            let current: Vec<Vec3> = source[v].iter().map(|p| t.apply(p)).collect();
            let current_normals: Vec<Vec3> = normals[v].iter().map(|n| t.apply_vector(n)).collect();
            let res = icp_points(&current, Some(&current_normals), &target, params)?;
            if res.correspondences == 0 {
                warnings.push(format!("view {v}: no correspondences within rejection distance"));
                continue;
            }
            rms[v] = res.rms;
            transforms[v] = res.transform.compose(&transforms[v]).orthonormalized();
        }
    }
    warnings.dedup();
    Ok(Alignment { transforms, rms, warnings })
}

/// Folds per-view corrections into the camera poses.
pub fn apply_alignment(m: &MapSet, transforms: &[RigidTransform]) -> MapSet {
    MapSet {
        rig: m.rig.transformed(transforms),
        views: m.views.clone(),
    }
}

//! Shape distances, depth-map error and volumetric Jaccard distance.
//!
//! Surface distances are sampled: a mesh contributes `samples` area-uniform
//! points, a point cloud contributes every point. The distance of a sample to
//! the other shape is the exact nearest-surface distance for a mesh and the
//! nearest-point distance for a cloud. Reductions run in a fixed order so
//! results do not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::kdtree::{nearest_brute_force, KdTree};
use crate::maps::MapSet;
use crate::mesh::TriangleMesh;
use crate::pointcloud::OrientedPointCloud;
use crate::sparse::det_sum;

pub const DEFAULT_SAMPLES: usize = 10_000;
pub const DEFAULT_VOXEL_RESOLUTION: usize = 128;
/// Largest fraction of voxels on which the three axis votes may disagree
/// before a mesh is declared not watertight.
pub const WATERTIGHT_DISAGREEMENT: f64 = 0.005;

#[derive(Clone, Copy, Debug)]
pub enum Shape<'a> {
    Mesh(&'a TriangleMesh),
    Points(&'a OrientedPointCloud),
}

impl<'a> From<&'a TriangleMesh> for Shape<'a> {
    fn from(m: &'a TriangleMesh) -> Self {
        Shape::Mesh(m)
    }
}

impl<'a> From<&'a OrientedPointCloud> for Shape<'a> {
    fn from(p: &'a OrientedPointCloud) -> Self {
        Shape::Points(p)
    }
}

impl Shape<'_> {
    fn check_non_empty(&self, role: &str) -> Result<()> {
        let empty = match self {
            Shape::Mesh(m) => m.is_empty() || !(m.total_area() > 0.0),
            Shape::Points(p) => p.is_empty(),
        };
        if empty {
            return Err(Error::EmptyShape(role.to_string()));
        }
        Ok(())
    }

    /// Sample points with normals.
    pub fn samples(&self, samples: usize, seed: u64) -> Result<OrientedPointCloud> {
        match self {
            Shape::Mesh(m) => m.sample_surface(samples, seed),
            Shape::Points(p) => Ok((*p).clone()),
        }
    }
}

/// Nearest-surface queries against one shape.
enum Target<'a> {
    Mesh(&'a TriangleMesh),
    Points(&'a OrientedPointCloud, KdTree),
}

impl<'a> Target<'a> {
    fn new(shape: Shape<'a>) -> Self {
        match shape {
            Shape::Mesh(m) => Target::Mesh(m),
            Shape::Points(p) => Target::Points(p, KdTree::new(p.points())),
        }
    }

    /// `(distance, normal at the nearest point)`.
    fn nearest(&self, q: &Vec3) -> (f64, Vec3) {
        match self {
            Target::Mesh(m) => {
                let s = m.nearest_surface_point(q).expect("non-empty mesh");
                (s.distance, s.normal)
            }
            Target::Points(p, tree) => {
                let (k, d) = tree.nearest(q).expect("non-empty cloud");
                (d, p.normals()[k])
            }
        }
    }

    fn nearest_brute_force(&self, q: &Vec3) -> (f64, Vec3) {
        match self {
            Target::Mesh(m) => {
                let s = m.nearest_surface_point_brute_force(q).expect("non-empty mesh");
                (s.distance, s.normal)
            }
            Target::Points(p, _) => {
                let (k, d) = nearest_brute_force(p.points(), q).expect("non-empty cloud");
                (d, p.normals()[k])
            }
        }
    }
}

/// Seed for the second shape's samples, so a shape compared with itself is
/// not trivially sampled at the same points in both directions.
fn second_seed(seed: u64) -> u64 {
    seed.wrapping_add(0x9E37_79B9_7F4A_7C15)
}

fn nearest_distances(from: &OrientedPointCloud, to: &Target, brute: bool) -> Vec<f64> {
    from.points()
        .par_iter()
        .map(|q| if brute { to.nearest_brute_force(q).0 } else { to.nearest(q).0 })
        .collect()
}

fn mean(values: &[f64]) -> f64 {
    det_sum(values) / values.len() as f64
}

fn max(values: &[f64]) -> f64 {
    values.iter().copied().fold(0.0, f64::max)
}

fn directional_distances(a: Shape, b: Shape, samples: usize, seed: u64, brute: bool) -> Result<Vec<f64>> {
    a.check_non_empty("first shape")?;
    b.check_non_empty("second shape")?;
    let from = a.samples(samples, seed)?;
    Ok(nearest_distances(&from, &Target::new(b), brute))
}

fn chamfer_impl(a: Shape, b: Shape, samples: usize, seed: u64, brute: bool) -> Result<f64> {
    let ab = directional_distances(a, b, samples, seed, brute)?;
    let ba = directional_distances(b, a, samples, second_seed(seed), brute)?;
    Ok(0.5 * (mean(&ab) + mean(&ba)))
}

/// Symmetric Chamfer distance: the average of the two directional means.
pub fn chamfer<'a>(a: impl Into<Shape<'a>>, b: impl Into<Shape<'a>>, samples: usize, seed: u64) -> Result<f64> {
    chamfer_impl(a.into(), b.into(), samples, seed, false)
}

/// Mean nearest-surface distance from samples of `a` to `b`.
pub fn chamfer_directional<'a>(
    a: impl Into<Shape<'a>>,
    b: impl Into<Shape<'a>>,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    Ok(mean(&directional_distances(a.into(), b.into(), samples, seed, false)?))
}

pub fn chamfer_brute_force<'a>(
    a: impl Into<Shape<'a>>,
    b: impl Into<Shape<'a>>,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    chamfer_impl(a.into(), b.into(), samples, seed, true)
}

/// Largest nearest-surface distance from samples of `recon` to `reference`.
pub fn hausdorff<'a>(
    recon: impl Into<Shape<'a>>,
    reference: impl Into<Shape<'a>>,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    Ok(max(&directional_distances(recon.into(), reference.into(), samples, seed, false)?))
}

pub fn hausdorff_brute_force<'a>(
    recon: impl Into<Shape<'a>>,
    reference: impl Into<Shape<'a>>,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    Ok(max(&directional_distances(recon.into(), reference.into(), samples, seed, true)?))
}

fn check_normals(cloud: &OrientedPointCloud, role: &str) -> Result<()> {
    if cloud.normals().iter().any(|n| !n.iter().all(|c| c.is_finite()) || n.norm() < 0.5) {
        return Err(Error::InvalidArgument(format!("{role} is missing normals")));
    }
    Ok(())
}

/// Mean angle in degrees between each recon sample's normal and the normal
/// at its nearest reference point.
pub fn normal_distance<'a>(
    recon: impl Into<Shape<'a>>,
    reference: impl Into<Shape<'a>>,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let (recon, reference) = (recon.into(), reference.into());
    recon.check_non_empty("reconstruction")?;
    reference.check_non_empty("reference")?;
    let from = recon.samples(samples, seed)?;
    check_normals(&from, "reconstruction")?;
    if let Shape::Points(p) = reference {
        check_normals(p, "reference")?;
    }
    let target = Target::new(reference);
    let angles: Vec<f64> = from
        .points()
        .par_iter()
        .zip(from.normals())
        .map(|(q, n)| {
            let (_, m) = target.nearest(q);
            let c = (n.dot(&m) / (n.norm() * m.norm())).clamp(-1.0, 1.0);
            c.acos().to_degrees()
        })
        .collect();
    Ok(mean(&angles))
}

/// Mean absolute depth difference over pixels foreground in both map sets,
/// per view, then averaged over views whose overlap is non-empty. Returns 0
/// when no view overlaps.
pub fn depth_map_error(a: &MapSet, b: &MapSet) -> Result<f64> {
    if a.views.len() != b.views.len() || a.rig.len() != b.rig.len() {
        return Err(Error::InvalidArgument(format!(
            "map sets have {} and {} views",
            a.views.len(),
            b.views.len()
        )));
    }
    for (v, (ca, cb)) in a.rig.cameras.iter().zip(&b.rig.cameras).enumerate() {
        let same = ca.width == cb.width
            && ca.height == cb.height
            && (ca.kappa - cb.kappa).abs() <= 1e-12
            && (ca.pose.rotation - cb.pose.rotation).amax() <= 1e-9
            && (ca.pose.translation - cb.pose.translation).amax() <= 1e-9;
        if !same {
            return Err(Error::InvalidArgument(format!("view {v}: map sets use different cameras")));
        }
    }
    let per_view: Vec<Option<f64>> = a
        .views
        .par_iter()
        .zip(&b.views)
        .map(|(va, vb)| {
            let diffs: Vec<f64> = va
                .mask
                .data()
                .iter()
                .zip(vb.mask.data())
                .zip(va.depth.data().iter().zip(vb.depth.data()))
                .filter(|((ma, mb), _)| **ma && **mb)
                .map(|(_, (da, db))| (*da as f64 - *db as f64).abs())
                .collect();
            (!diffs.is_empty()).then(|| mean(&diffs))
        })
        .collect();
    let used: Vec<f64> = per_view.into_iter().flatten().collect();
    Ok(if used.is_empty() { 0.0 } else { mean(&used) })
}

/// Binary occupancy over an axis-aligned cube, x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    resolution: usize,
    min: f64,
    max: f64,
    occupancy: Vec<bool>,
}

impl VoxelGrid {
    /// Empty grid over `[-1, 1]³`.
    pub fn new(resolution: usize) -> Result<Self> {
        Self::with_bounds(resolution, -1.0, 1.0)
    }

    pub fn with_bounds(resolution: usize, min: f64, max: f64) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::InvalidArgument(format!("voxel resolution must be >= 2, got {resolution}")));
        }
        if !(min < max) {
            return Err(Error::InvalidArgument("voxel bounds are empty".into()));
        }
        Ok(VoxelGrid { resolution, min, max, occupancy: vec![false; resolution.pow(3)] })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.min, self.max)
    }

    pub fn voxel_size(&self) -> f64 {
        (self.max - self.min) / self.resolution as f64
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupancy
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.resolution * (j + self.resolution * k)
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.occupancy[self.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: bool) {
        let idx = self.index(i, j, k);
        self.occupancy[idx] = v;
    }

    /// Coordinate of voxel center `i` along any axis.
    #[inline]
    pub fn center(&self, i: usize) -> f64 {
        self.min + (i as f64 + 0.5) * self.voxel_size()
    }

    pub fn count(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoxelMode {
    /// Interior by ray parity; requires a closed mesh.
    #[default]
    Solid,
    /// Voxels touched by any triangle.
    Surface,
}

pub fn voxelize_with(mesh: &TriangleMesh, resolution: usize, mode: VoxelMode) -> Result<VoxelGrid> {
    match mode {
        VoxelMode::Solid => voxelize(mesh, resolution),
        VoxelMode::Surface => voxelize_surface(mesh, resolution),
    }
}

/// Parity of crossings along one grid line, per voxel center on it.
///
/// A ray through a shared edge or vertex reports one hit per incident
/// triangle; hits at the same parameter with the same orientation are one
/// crossing. Grazing a fold yields opposite orientations and stays counted
/// twice, which keeps the parity right.
fn line_parity(mesh: &TriangleMesh, origin: Vec3, axis: usize, centers: &[f64]) -> Vec<bool> {
    let mut dir = Vec3::zeros();
    dir[axis] = 1.0;
    let hits = mesh.ray_intersect_all(&origin, &dir);
    let mut crossings: Vec<(f64, bool)> = Vec::with_capacity(hits.len());
    for (t, tri) in hits {
        let s = mesh.face_normal(tri)[axis];
        if s == 0.0 {
            continue;
        }
        let pos = origin[axis] + t;
        let dup = crossings.iter().rev().take_while(|c| pos - c.0 <= 1e-9).any(|c| c.1 == (s > 0.0));
        if !dup {
            crossings.push((pos, s > 0.0));
        }
    }
    let mut out = Vec::with_capacity(centers.len());
    let mut k = 0;
    for &c in centers {
        while k < crossings.len() && crossings[k].0 < c {
            k += 1;
        }
        out.push(k % 2 == 1);
    }
    out
}

/// Solid voxelization by ray parity, voted over rays along x, y and z.
///
/// Errors with [`Error::NotWatertight`] when the votes disagree on more than
/// [`WATERTIGHT_DISAGREEMENT`] of all voxels; [`voxelize_surface`] handles
/// open meshes.
pub fn voxelize(mesh: &TriangleMesh, resolution: usize) -> Result<VoxelGrid> {
    let mut grid = VoxelGrid::new(resolution)?;
    if mesh.is_empty() {
        return Ok(grid);
    }
    let r = resolution;
    let centers: Vec<f64> = (0..r).map(|i| grid.center(i)).collect();
    let start = mesh.bounds().min.min().min(grid.min) - 1.0;
    let mut votes = vec![0u8; r * r * r];
    for axis in 0..3 {
        let (u_axis, v_axis) = ((axis + 1) % 3, (axis + 2) % 3);
        let lines: Vec<Vec<bool>> = (0..r * r)
            .into_par_iter()
            .map(|line| {
                let (u, v) = (line % r, line / r);
                let mut origin = Vec3::zeros();
                origin[axis] = start;
                origin[u_axis] = centers[u];
                origin[v_axis] = centers[v];
                line_parity(mesh, origin, axis, &centers)
            })
            .collect();
        for (line, parity) in lines.iter().enumerate() {
            let (u, v) = (line % r, line / r);
            for (w, &inside) in parity.iter().enumerate() {
                let mut ijk = [0usize; 3];
                ijk[axis] = w;
                ijk[u_axis] = u;
                ijk[v_axis] = v;
                votes[grid.index(ijk[0], ijk[1], ijk[2])] += inside as u8;
            }
        }
    }
    let disagree = votes.iter().filter(|&&v| v == 1 || v == 2).count();
    let fraction = disagree as f64 / votes.len() as f64;
    if fraction > WATERTIGHT_DISAGREEMENT {
        return Err(Error::NotWatertight { fraction });
    }
    for (o, v) in grid.occupancy.iter_mut().zip(&votes) {
        *o = *v >= 2;
    }
    Ok(grid)
}

/// Separating-axis test between a triangle and an axis-aligned box.
pub fn triangle_box_overlap(tri: [Vec3; 3], center: Vec3, half: f64) -> bool {
    let v = [tri[0] - center, tri[1] - center, tri[2] - center];
    let separated = |axis: Vec3| {
        let r = half * (axis.x.abs() + axis.y.abs() + axis.z.abs());
        let p = [axis.dot(&v[0]), axis.dot(&v[1]), axis.dot(&v[2])];
        let lo = p[0].min(p[1]).min(p[2]);
        let hi = p[0].max(p[1]).max(p[2]);
        lo > r || hi < -r
    };
    let e = [v[1] - v[0], v[2] - v[1], v[0] - v[2]];
    let basis = [Vec3::x(), Vec3::y(), Vec3::z()];
    if basis.iter().any(|&b| separated(b)) {
        return false;
    }
    if separated(e[0].cross(&e[1])) {
        return false;
    }
    for b in &basis {
        for ed in &e {
            let a = b.cross(ed);
            if a.norm_squared() > 0.0 && separated(a) {
                return false;
            }
        }
    }
    true
}

/// Marks every voxel whose cell intersects a triangle.
pub fn voxelize_surface(mesh: &TriangleMesh, resolution: usize) -> Result<VoxelGrid> {
    let mut grid = VoxelGrid::new(resolution)?;
    let size = grid.voxel_size();
    let half = 0.5 * size;
    let r = resolution as i64;
    let cell = |x: f64| ((x - grid.min) / size).floor() as i64;
    let touched: Vec<Vec<usize>> = mesh
        .triangles()
        .par_iter()
        .map(|t| {
            let p = [mesh.vertices()[t[0] as usize], mesh.vertices()[t[1] as usize], mesh.vertices()[t[2] as usize]];
            let mut lo = [0i64; 3];
            let mut hi = [0i64; 3];
            for a in 0..3 {
                let mn = p[0][a].min(p[1][a]).min(p[2][a]);
                let mx = p[0][a].max(p[1][a]).max(p[2][a]);
                lo[a] = cell(mn).max(0);
                hi[a] = cell(mx).min(r - 1);
            }
            let mut out = Vec::new();
            for k in lo[2]..=hi[2] {
                for j in lo[1]..=hi[1] {
                    for i in lo[0]..=hi[0] {
                        let (i, j, k) = (i as usize, j as usize, k as usize);
                        let c = Vec3::new(grid.center(i), grid.center(j), grid.center(k));
                        if triangle_box_overlap(p, c, half) {
                            out.push(grid.index(i, j, k));
                        }
                    }
                }
            }
            out
        })
        .collect();
    for idx in touched.into_iter().flatten() {
        grid.occupancy[idx] = true;
    }
    Ok(grid)
}

/// `1 − |a ∩ b| / |a ∪ b|`; two empty grids are at distance 0.
pub fn volumetric_jaccard(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    if a.resolution != b.resolution || a.min != b.min || a.max != b.max {
        return Err(Error::InvalidArgument(format!(
            "voxel grids differ: resolution {} vs {}",
            a.resolution, b.resolution
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.occupancy.iter().zip(&b.occupancy) {
        inter += (*x && *y) as usize;
        union += (*x || *y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { (union - inter) as f64 / union as f64 })
}

/// The five measures for one reconstruction against one reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub chamfer: f64,
    pub hausdorff: f64,
    pub normal_distance_deg: f64,
    /// Absent when no map sets were supplied.
    pub depth_map_error: Option<f64>,
    /// Absent when either shape is a point cloud.
    pub volumetric_jaccard: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsParams {
    pub samples: usize,
    pub seed: u64,
    pub voxel_resolution: usize,
    pub voxel_mode: VoxelMode,
    /// Report the one-way recon → reference Chamfer mean instead.
    pub directional_chamfer: bool,
}

impl Default for MetricsParams {
    fn default() -> Self {
        MetricsParams {
            samples: DEFAULT_SAMPLES,
            seed: 0,
            voxel_resolution: DEFAULT_VOXEL_RESOLUTION,
            voxel_mode: VoxelMode::Solid,
            directional_chamfer: false,
        }
    }
}

pub fn evaluate(
    recon: Shape,
    reference: Shape,
    maps: Option<(&MapSet, &MapSet)>,
    params: &MetricsParams,
) -> Result<MetricsRecord> {
    let chamfer = if params.directional_chamfer {
        chamfer_directional(recon, reference, params.samples, params.seed)?
    } else {
        chamfer(recon, reference, params.samples, params.seed)?
    };
    let volumetric_jaccard = match (recon, reference) {
        (Shape::Mesh(a), Shape::Mesh(b)) => {
            let ga = voxelize_with(a, params.voxel_resolution, params.voxel_mode)?;
            let gb = voxelize_with(b, params.voxel_resolution, params.voxel_mode)?;
            Some(volumetric_jaccard(&ga, &gb)?)
        }
        _ => None,
    };
    Ok(MetricsRecord {
        chamfer,
        hausdorff: hausdorff(recon, reference, params.samples, params.seed)?,
        normal_distance_deg: normal_distance(recon, reference, params.samples, params.seed)?,
        depth_map_error: maps.map(|(a, b)| depth_map_error(a, b)).transpose()?,
        volumetric_jaccard,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RigidTransform;
    use crate::primitives::{box_mesh, icosphere, torus};
    use crate::render::{render_mapset, RenderOptions};
    use crate::views::ViewRig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(points: &[[f64; 3]]) -> OrientedPointCloud {
        OrientedPointCloud::new(points.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect(), vec![Vec3::z(); points.len()])
    }

    fn random_cloud(n: usize, seed: u64) -> OrientedPointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<[f64; 3]> = (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        cloud(&pts)
    }

    #[test]
    fn point_pair_distances() {
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let b = cloud(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&a, &b, 10, 0).unwrap(), 1.0);
        assert_eq!(hausdorff(&a, &b, 10, 0).unwrap(), 1.0);
        assert_eq!(chamfer(&a, &a, 10, 0).unwrap(), 0.0);
    }

    #[test]
    fn empty_shapes_are_errors() {
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let e = OrientedPointCloud::default();
        assert!(matches!(chamfer(&a, &e, 10, 0), Err(Error::EmptyShape(_))));
        assert!(matches!(hausdorff(&e, &a, 10, 0), Err(Error::EmptyShape(_))));
    }

    #[test]
    fn outlier_sets_hausdorff_and_is_directional() {
        let mut reference = random_cloud(300, 1);
        reference.push(Vec3::new(0.0, 0.0, 1.0), Vec3::z());
        let mut recon = reference.clone();
        recon.push(Vec3::new(0.0, 0.0, 1.5), Vec3::z());
        assert_eq!(hausdorff(&recon, &reference, 1, 0).unwrap(), 0.5);
        assert!(hausdorff(&reference, &recon, 1, 0).unwrap() < 0.5);
    }

    #[test]
    fn accelerated_matches_brute_force_exactly() {
        let a = random_cloud(1000, 2);
        let b = random_cloud(1000, 3);
        assert_eq!(chamfer(&a, &b, 0, 0).unwrap(), chamfer_brute_force(&a, &b, 0, 0).unwrap());
        assert_eq!(hausdorff(&a, &b, 0, 0).unwrap(), hausdorff_brute_force(&a, &b, 0, 0).unwrap());
        let m = torus(0.6, 0.25, 24, 12);
        assert_eq!(chamfer(&m, &a, 1000, 4).unwrap(), chamfer_brute_force(&m, &a, 1000, 4).unwrap());
        assert_eq!(hausdorff(&a, &m, 1000, 4).unwrap(), hausdorff_brute_force(&a, &m, 1000, 4).unwrap());
    }

    #[test]
    fn concentric_spheres() {
        let outer = icosphere(1.0, 5);
        let inner = icosphere(0.9, 5);
        let c = chamfer(&outer, &inner, DEFAULT_SAMPLES, 7).unwrap();
        assert!((c - 0.1).abs() < 2e-3, "chamfer {c}");
        let h = hausdorff(&inner, &outer, DEFAULT_SAMPLES, 7).unwrap();
        assert!((h - 0.1).abs() < 2e-3, "hausdorff {h}");
    }

    #[test]
    fn identical_mesh_is_zero() {
        let m = icosphere(0.7, 3);
        assert!(hausdorff(&m, &m, 2000, 1).unwrap() < 1e-6);
        assert!(chamfer(&m, &m, 2000, 1).unwrap() < 1e-6);
        assert!(normal_distance(&m, &m, 2000, 1).unwrap() < 1e-6);
    }

    #[test]
    fn rigid_invariance() {
        let a = icosphere(0.6, 3);
        let b = torus(0.5, 0.2, 32, 16);
        let t = RigidTransform::from_axis_angle(Vec3::new(0.3, -1.0, 0.5), 1.1, Vec3::new(0.2, 0.1, -0.3));
        let (ta, tb) = (a.transformed(&t).unwrap(), b.transformed(&t).unwrap());
        let c0 = chamfer(&a, &b, 3000, 5).unwrap();
        let c1 = chamfer(&ta, &tb, 3000, 5).unwrap();
        assert!((c0 - c1).abs() < 1e-9);
        let h0 = hausdorff(&a, &b, 3000, 5).unwrap();
        let h1 = hausdorff(&ta, &tb, 3000, 5).unwrap();
        assert!((h0 - h1).abs() < 1e-9);
    }

    #[test]
    fn flipped_normals_give_180_degrees() {
        let m = icosphere(0.7, 2);
        let s = m.sample_surface(500, 3).unwrap();
        let flipped = OrientedPointCloud::new(s.points().to_vec(), s.normals().iter().map(|n| -n).collect());
        let d = normal_distance(&flipped, &s, 0, 0).unwrap();
        assert!((d - 180.0).abs() < 1e-9);
    }

    #[test]
    fn tilted_plane_normal_distance() {
        let plane = |angle: f64| {
            let t = RigidTransform::from_axis_angle(Vec3::x(), angle, Vec3::zeros());
            let v = [[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]]
                .iter()
                .map(|p| t.apply(&Vec3::new(p[0], p[1], 0.0)))
                .collect();
            TriangleMesh::new(v, vec![[0, 1, 2], [0, 2, 3]]).unwrap()
        };
        let d = normal_distance(&plane(10f64.to_radians()), &plane(0.0), 2000, 2).unwrap();
        assert!((d - 10.0).abs() < 0.1, "{d}");
    }

    #[test]
    fn missing_normals_are_an_error() {
        let a = OrientedPointCloud::new(vec![Vec3::zeros()], vec![Vec3::zeros()]);
        let b = cloud(&[[1.0, 0.0, 0.0]]);
        assert!(normal_distance(&a, &b, 1, 0).is_err());
        assert!(normal_distance(&b, &a, 1, 0).is_err());
    }

    #[test]
    fn depth_error_oracles() {
        let rig = ViewRig::icosahedron(48, 48).unwrap();
        let mut m = render_mapset(&icosphere(0.7, 3), &rig, RenderOptions::default()).unwrap();
        assert_eq!(depth_map_error(&m, &m).unwrap(), 0.0);
        // Depths on a 2^-10 lattice so the f32 offset below is exact.
        for v in &mut m.views {
            for d in v.depth.data_mut() {
                *d = (*d * 1024.0).round() / 1024.0;
            }
        }

        let mut shifted = m.clone();
        for v in &mut shifted.views {
            for (d, f) in v.depth.data_mut().iter_mut().zip(v.mask.data().to_vec()) {
                if f {
                    *d += 0.125;
                }
            }
        }
        assert_eq!(depth_map_error(&m, &shifted).unwrap(), 0.125);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut noisy = m.clone();
        let mut per_view = Vec::new();
        for (va, vb) in m.views.iter().zip(&mut noisy.views) {
            let mut deltas = Vec::new();
            for (k, d) in vb.depth.data_mut().iter_mut().enumerate() {
                if va.mask.data()[k] {
                    *d += rng.random_range(-0.05f32..0.05);
                    deltas.push((*d as f64 - va.depth.data()[k] as f64).abs());
                }
            }
            if !deltas.is_empty() {
                per_view.push(deltas.iter().sum::<f64>() / deltas.len() as f64);
            }
        }
        let expected = per_view.iter().sum::<f64>() / per_view.len() as f64;
        assert!((depth_map_error(&m, &noisy).unwrap() - expected).abs() < 1e-12);

        let other = render_mapset(&icosphere(0.7, 3), &ViewRig::icosahedron(32, 32).unwrap(), RenderOptions::default()).unwrap();
        assert!(depth_map_error(&m, &other).is_err());
    }

    #[test]
    fn cube_voxel_count_is_exact() {
        let g = voxelize(&box_mesh(Vec3::repeat(-0.5), Vec3::repeat(0.5)), 128).unwrap();
        assert_eq!(g.count(), 64usize.pow(3));
    }

    #[test]
    fn sphere_voxel_volume() {
        let r = 0.8;
        let g = voxelize(&icosphere(r, 5), 128).unwrap();
        let expected = 4.0 / 3.0 * std::f64::consts::PI * r.powi(3) / g.voxel_size().powi(3);
        assert!((g.count() as f64 / expected - 1.0).abs() < 0.01, "{} vs {expected}", g.count());
    }

    #[test]
    fn empty_mesh_voxelizes_to_background() {
        let g = voxelize(&TriangleMesh::new(vec![], vec![]).unwrap(), 16).unwrap();
        assert_eq!(g.count(), 0);
        assert_eq!(volumetric_jaccard(&g, &g).unwrap(), 0.0);
    }

    #[test]
    fn open_mesh_is_rejected_and_surface_mode_works() {
        let cube = box_mesh(Vec3::repeat(-0.5), Vec3::repeat(0.5));
        let open = TriangleMesh::new(cube.vertices().to_vec(), cube.triangles()[2..].to_vec()).unwrap();
        assert!(matches!(voxelize(&open, 32), Err(Error::NotWatertight { .. })));
        let s = voxelize_surface(&open, 32).unwrap();
        assert!(s.count() > 0);
        // Every surface voxel of the closed cube shell sits on its faces.
        let shell = voxelize_surface(&cube, 32).unwrap();
        assert!(shell.count() >= s.count());
    }

    #[test]
    fn cube_jaccard_is_two_thirds() {
        let a = voxelize(&box_mesh(Vec3::new(-0.5, -0.5, -0.5), Vec3::new(0.5, 0.5, 0.5)), 128).unwrap();
        let b = voxelize(&box_mesh(Vec3::new(0.0, -0.5, -0.5), Vec3::new(1.0, 0.5, 0.5)), 128).unwrap();
        assert_eq!(volumetric_jaccard(&a, &b).unwrap(), 2.0 / 3.0);
        assert_eq!(volumetric_jaccard(&b, &a).unwrap(), 2.0 / 3.0);
        assert_eq!(volumetric_jaccard(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn clipped_cube_jaccard_is_one_half() {
        // The shifted cube reaches x = 1.5 and is clipped by the grid bounds.
        let a = voxelize(&box_mesh(Vec3::new(0.0, -0.5, -0.5), Vec3::new(1.0, 0.5, 0.5)), 128).unwrap();
        let b = voxelize(&box_mesh(Vec3::new(0.5, -0.5, -0.5), Vec3::new(1.5, 0.5, 0.5)), 128).unwrap();
        assert_eq!(volumetric_jaccard(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn disjoint_and_mismatched_grids() {
        let a = voxelize(&box_mesh(Vec3::repeat(-0.9), Vec3::repeat(-0.5)), 32).unwrap();
        let b = voxelize(&box_mesh(Vec3::repeat(0.5), Vec3::repeat(0.9)), 32).unwrap();
        assert_eq!(volumetric_jaccard(&a, &b).unwrap(), 1.0);
        assert!(volumetric_jaccard(&a, &VoxelGrid::new(16).unwrap()).is_err());
    }

    #[test]
    fn triangle_box_cases() {
        let tri = [Vec3::new(-1.0, -1.0, 0.0), Vec3::new(1.0, -1.0, 0.0), Vec3::new(0.0, 1.0, 0.0)];
        assert!(triangle_box_overlap(tri, Vec3::zeros(), 0.1));
        assert!(!triangle_box_overlap(tri, Vec3::new(0.0, 0.0, 0.5), 0.1));
        assert!(!triangle_box_overlap(tri, Vec3::new(0.9, 0.9, 0.0), 0.1));
    }

    #[test]
    fn metrics_are_thread_count_independent() {
        let a = icosphere(0.6, 3);
        let b = torus(0.5, 0.2, 32, 16);
        let run = |n| {
            rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap().install(|| {
                evaluate(Shape::Mesh(&a), Shape::Mesh(&b), None, &MetricsParams { samples: 2000, voxel_resolution: 32, ..Default::default() }).unwrap()
            })
        };
        assert_eq!(run(1), run(4));
    }
}

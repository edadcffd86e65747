//! Laplacian mesh deformation toward per-view silhouette contours.
//!
//! Each contour point claims the nearest projected silhouette vertex of the
//! mesh in its view. The deformed positions minimize
//! `w_lap ‖L V′ − L V‖² + w_con Σ ‖Π_xy(v′) − c‖²`, where `L` is the uniform
//! graph Laplacian and `Π_xy` takes the two in-plane camera coordinates,
//! leaving view depth free.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec3};
use crate::kdtree::KdTree;
use crate::mesh::TriangleMesh;
use crate::sparse::{solve_normal_equations, Csr, LeastSquares};
use crate::views::{OrthographicCamera, ViewRig};

/// Minimum number of contour points per view.
pub const MIN_CONTOUR_POINTS: usize = 8;

/// Uniform Laplacian: row `i` is `v_i − mean(1-ring of v_i)`.
pub fn uniform_laplacian(mesh: &TriangleMesh) -> Result<Csr> {
    let n = mesh.vertices().len();
    let neighbors = mesh.vertex_neighbors();
    let mut l = Csr::new(n);
    for (i, nb) in neighbors.iter().enumerate() {
        if nb.is_empty() {
            return Err(Error::InvalidMesh(format!("vertex {i} has no neighbors")));
        }
        let w = -1.0 / nb.len() as f64;
        let mut row: Vec<(u32, f64)> = nb.iter().map(|&k| (k, w)).collect();
        row.push((i as u32, 1.0));
        row.sort_unstable_by_key(|e| e.0);
        l.push_row(&row);
    }
    Ok(l)
}

/// Applies a Laplacian to vertex positions.
pub fn laplacian_coordinates(l: &Csr, vertices: &[Vec3]) -> Vec<Vec3> {
    (0..l.n_rows())
        .map(|r| {
            let (c, v) = l.row(r);
            c.iter().zip(v).map(|(&c, &w)| vertices[c as usize] * w).sum()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContourRecord {
    pub view_index: usize,
    /// Continuous pixel coordinates, pixel `(i, j)` centered at `(i, j)`.
    pub points: Vec<[f64; 2]>,
}

/// Contours for a subset of the views of a rig.
#[derive(Clone, Debug, PartialEq)]
pub struct ContourConstraintSet {
    pub rig: ViewRig,
    pub contours: Vec<ContourRecord>,
}

impl ContourConstraintSet {
    pub fn new(rig: ViewRig, contours: Vec<ContourRecord>) -> Result<Self> {
        for c in &contours {
            if c.view_index >= rig.len() {
                return Err(Error::InvalidArgument(format!(
                    "contour view {} is outside the rig ({} views)",
                    c.view_index,
                    rig.len()
                )));
            }
            if c.points.len() < MIN_CONTOUR_POINTS {
                return Err(Error::InvalidArgument(format!(
                    "view {} has {} contour points, need at least {MIN_CONTOUR_POINTS}",
                    c.view_index,
                    c.points.len()
                )));
            }
            if c.points.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("view {} has non-finite contour points", c.view_index)));
            }
        }
        Ok(ContourConstraintSet { rig, contours })
    }

    pub fn camera(&self, record: &ContourRecord) -> &OrthographicCamera {
        &self.rig.cameras[record.view_index]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.contours).expect("contours serialize")
    }

    pub fn from_json(text: &str, rig: ViewRig) -> Result<Self> {
        let contours: Vec<ContourRecord> =
            serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("contour JSON: {e}")))?;
        Self::new(rig, contours)
    }

    pub fn read(path: &Path, rig: ViewRig) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let contours: Vec<ContourRecord> =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        Self::new(rig, contours)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformParams {
    pub laplacian_weight: f64,
    pub contour_weight: f64,
    /// Extra rounds that recompute silhouettes and correspondences on the
    /// deformed mesh; 0 is the single-shot solve.
    pub reassign_iterations: usize,
    pub solver_tolerance: f64,
    pub solver_max_iterations: usize,
}

impl Default for DeformParams {
    fn default() -> Self {
        DeformParams {
            laplacian_weight: 1.0,
            contour_weight: 0.5,
            reassign_iterations: 0,
            solver_tolerance: 1e-10,
            solver_max_iterations: 5000,
        }
    }
}

impl DeformParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.laplacian_weight >= 0.0 && self.contour_weight >= 0.0) {
            return Err(Error::InvalidArgument("deformation weights must be non-negative".into()));
        }
        if !(self.solver_tolerance > 0.0) || self.solver_max_iterations == 0 {
            return Err(Error::InvalidArgument("solver tolerance and iteration cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DeformResult {
    pub mesh: TriangleMesh,
    pub warnings: Vec<String>,
    /// Mean in-plane distance from contour points to their matched vertices
    /// before and after, object units.
    pub residual_before: f64,
    pub residual_after: f64,
    pub solver_iterations: usize,
}

/// Vertices on the view silhouette: touching both a front- and a
/// back-facing triangle, or on an open boundary edge.
pub fn silhouette_vertices(mesh: &TriangleMesh, camera: &OrthographicCamera) -> Vec<usize> {
    let toward = camera.z_axis();
    let n = mesh.vertices().len();
    let (mut front, mut back) = (vec![false; n], vec![false; n]);
    let mut edges: HashMap<(u32, u32), u32> = HashMap::new();
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let facing = mesh.face_normal(t).dot(&toward) > 0.0;
        for k in 0..3 {
            let v = tri[k] as usize;
            if facing {
                front[v] = true;
            } else {
                back[v] = true;
            }
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        }
    }
    let mut boundary = vec![false; n];
    for (&(a, b), &count) in &edges {
        if count == 1 {
            boundary[a as usize] = true;
            boundary[b as usize] = true;
        }
    }
    (0..n).filter(|&v| (front[v] && back[v]) || boundary[v]).collect()
}

/// One contour point bound to one mesh vertex; the target is the point's
/// in-plane camera coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContourMatch {
    pub view_index: usize,
    pub vertex: usize,
    pub target: [f64; 2],
}

fn in_plane(camera: &OrthographicCamera, p: &Vec3) -> [f64; 2] {
    let c = camera.to_camera(p);
    [c.x, c.y]
}

/// Nearest projected silhouette vertex for every contour point.
pub fn match_contours(
    vertices: &[Vec3],
    mesh: &TriangleMesh,
    constraints: &ContourConstraintSet,
) -> (Vec<ContourMatch>, Vec<String>) {
    let per_view: Vec<(Vec<ContourMatch>, Option<String>)> = constraints
        .contours
        .par_iter()
        .map(|record| {
            let cam = constraints.camera(record);
            let posed = mesh.with_vertices(vertices.to_vec());
            let sil = match &posed {
                Ok(m) => silhouette_vertices(m, cam),
                Err(_) => Vec::new(),
            };
            if sil.is_empty() {
                return (Vec::new(), Some(format!("view {}: no silhouette vertices, skipped", record.view_index)));
            }
            let projected: Vec<Vec3> = sil
                .iter()
                .map(|&v| {
                    let [x, y] = in_plane(cam, &vertices[v]);
                    Vec3::new(x, y, 0.0)
                })
                .collect();
            let tree = KdTree::new(&projected);
            let matches = record
                .points
                .iter()
                .map(|p| {
                    let c = cam.pixel_to_camera(p[0], p[1], 0.0);
                    let (k, _) = tree.nearest(&Vec3::new(c.x, c.y, 0.0)).expect("non-empty tree");
                    ContourMatch { view_index: record.view_index, vertex: sil[k], target: [c.x, c.y] }
                })
                .collect();
            (matches, None)
        })
        .collect();
    let mut matches = Vec::new();
    let mut warnings = Vec::new();
    for (m, w) in per_view {
        matches.extend(m);
        warnings.extend(w);
    }
    (matches, warnings)
}

fn mean_residual(vertices: &[Vec3], matches: &[ContourMatch], rig: &ViewRig) -> f64 {
    if matches.is_empty() {
        return 0.0;
    }
    let total: f64 = matches
        .iter()
        .map(|m| {
            let [x, y] = in_plane(&rig.cameras[m.view_index], &vertices[m.vertex]);
            ((x - m.target[0]).powi(2) + (y - m.target[1]).powi(2)).sqrt()
        })
        .sum();
    total / matches.len() as f64
}

/// Mean distance from each contour point to the nearest projected
/// silhouette vertex of `mesh`, in object units.
pub fn silhouette_residual(mesh: &TriangleMesh, constraints: &ContourConstraintSet) -> f64 {
    let (matches, _) = match_contours(mesh.vertices(), mesh, constraints);
    mean_residual(mesh.vertices(), &matches, &constraints.rig)
}

/// Unknowns are laid out coordinate-major: all x, then all y, then all z.
fn solve_positions(
    l: &Csr,
    delta: &[Vec3],
    start: &[Vec3],
    matches: &[ContourMatch],
    rig: &ViewRig,
    params: &DeformParams,
) -> Result<(Vec<Vec3>, usize)> {
    let n = start.len();
    let mut ls = LeastSquares::new(3 * n);
    let sl = params.laplacian_weight.sqrt();
    if sl > 0.0 {
        for axis in 0..3 {
            for (r, d) in delta.iter().enumerate() {
                let (c, v) = l.row(r);
                let row: Vec<(u32, f64)> = c.iter().zip(v).map(|(&c, &w)| (c + (axis * n) as u32, sl * w)).collect();
                ls.push(&row, sl * d[axis]);
            }
        }
    }
    let sc = params.contour_weight.sqrt();
    if sc > 0.0 {
        for m in matches {
            let cam = &rig.cameras[m.view_index];
            let origin = cam.pose.translation;
            for (k, target) in m.target.iter().enumerate() {
                let axis = cam.pose.rotation.column(k).into_owned();
                let row: Vec<(u32, f64)> = (0..3).map(|a| ((a * n + m.vertex) as u32, sc * axis[a])).collect();
                ls.push(&row, sc * (target + axis.dot(&origin)));
            }
        }
    }
    let mut x: Vec<f64> = (0..3).flat_map(|a| start.iter().map(move |v| v[a])).collect();
    let outcome = solve_normal_equations(&ls, &mut x, params.solver_tolerance, params.solver_max_iterations)?;
    let mut out: Vec<Vec3> = (0..n).map(|i| Vec3::new(x[i], x[n + i], x[2 * n + i])).collect();

    // Translations along directions no contour constrains are free. The
    // preconditioner leaks into them in a frame-dependent way, so drop the
    // mean displacement there.
    let mut constrained = Mat3::zeros();
    if sc > 0.0 {
        for m in matches {
            let r = &rig.cameras[m.view_index].pose.rotation;
            for k in 0..2 {
                let a = r.column(k);
                constrained += a * a.transpose();
            }
        }
    }
    let eig = constrained.symmetric_eigen();
    let top = eig.eigenvalues.max().max(0.0);
    let mean_shift: Vec3 = out.iter().zip(start).map(|(o, s)| o - s).sum::<Vec3>() / n as f64;
    let mut drift = Vec3::zeros();
    for k in 0..3 {
        if eig.eigenvalues[k] <= 1e-9 * top || top == 0.0 {
            let d = eig.eigenvectors.column(k).into_owned();
            drift += d * d.dot(&mean_shift);
        }
    }
    for v in &mut out {
        *v -= drift;
    }
    Ok((out, outcome.iterations))
}

pub fn deform_to_contours(
    mesh: &TriangleMesh,
    constraints: &ContourConstraintSet,
    params: &DeformParams,
) -> Result<DeformResult> {
    params.validate()?;
    if mesh.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let l = uniform_laplacian(mesh)?;
    let original = mesh.vertices().to_vec();
    let delta = laplacian_coordinates(&l, &original);
    let (mut matches, mut warnings) = match_contours(&original, mesh, constraints);
    let residual_before = mean_residual(&original, &matches, &constraints.rig);
    let mut current = original.clone();
    let mut iterations = 0;
    for round in 0..=params.reassign_iterations {
        if round > 0 {
            let (m, w) = match_contours(&current, mesh, constraints);
            matches = m;
            warnings.extend(w);
        }
        let (next, it) = solve_positions(&l, &delta, &current, &matches, &constraints.rig, params)?;
        current = next;
        iterations += it;
    }
    let residual_after = mean_residual(&current, &matches, &constraints.rig);
    warnings.sort();
    warnings.dedup();
    Ok(DeformResult {
        mesh: mesh.with_vertices(current)?,
        warnings,
        residual_before,
        residual_after,
        solver_iterations: iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RigidTransform;
    use crate::primitives::{bumpy_sphere, icosphere};

    fn single_view_rig() -> ViewRig {
        let rig = ViewRig::icosahedron(128, 128).unwrap();
        ViewRig { cameras: vec![rig.cameras[0]], up_axis: rig.up_axis }
    }

    fn circle(cam: &OrthographicCamera, radius: f64, n: usize) -> Vec<[f64; 2]> {
        let c = (cam.width as f64 / 2.0 - 0.5, cam.height as f64 / 2.0 - 0.5);
        (0..n)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / n as f64;
                [c.0 + radius / cam.kappa * a.cos(), c.1 + radius / cam.kappa * a.sin()]
            })
            .collect()
    }

    fn own_silhouette(mesh: &TriangleMesh, rig: &ViewRig) -> ContourConstraintSet {
        let contours = (0..rig.len())
            .map(|v| {
                let cam = &rig.cameras[v];
                let points = silhouette_vertices(mesh, cam)
                    .iter()
                    .map(|&k| {
                        let (px, py, _) = cam.project(&mesh.vertices()[k]);
                        [px, py]
                    })
                    .collect();
                ContourRecord { view_index: v, points }
            })
            .collect();
        ContourConstraintSet::new(rig.clone(), contours).unwrap()
    }

    #[test]
    fn planar_grid_interior_laplacian_vanishes() {
        let mut verts = Vec::new();
        for j in 0..5 {
            for i in 0..5 {
                verts.push(Vec3::new(i as f64 * 0.1, j as f64 * 0.1, 0.0));
            }
        }
        let mut tris = Vec::new();
        for j in 0..4u32 {
            for i in 0..4u32 {
                let a = j * 5 + i;
                tris.push([a, a + 1, a + 6]);
                tris.push([a, a + 6, a + 5]);
                tris.push([a, a + 1, a + 5]);
                tris.push([a + 1, a + 6, a + 5]);
            }
        }
        let mesh = TriangleMesh::new(verts, tris).unwrap();
        let l = uniform_laplacian(&mesh).unwrap();
        let d = laplacian_coordinates(&l, mesh.vertices());
        // Interior vertices see all eight neighbors of the grid.
        assert!(d[12].norm() < 1e-15);
    }

    #[test]
    fn tetrahedron_rows_are_vertex_minus_centroid() {
        let v = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
        ];
        let mesh = TriangleMesh::new(v.clone(), vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]]).unwrap();
        let d = laplacian_coordinates(&uniform_laplacian(&mesh).unwrap(), &v);
        for i in 0..4 {
            let others: Vec3 = (0..4).filter(|&k| k != i).map(|k| v[k]).sum::<Vec3>() / 3.0;
            assert!((d[i] - (v[i] - others)).norm() < 1e-15);
        }
    }

    #[test]
    fn laplacian_rotates_with_mesh() {
        let mesh = icosphere(0.5, 2);
        let t = RigidTransform::from_axis_angle(Vec3::new(1.0, 2.0, 3.0), 0.7, Vec3::new(0.1, 0.0, -0.2));
        let moved = mesh.transformed(&t).unwrap();
        let l = uniform_laplacian(&mesh).unwrap();
        let a = laplacian_coordinates(&l, mesh.vertices());
        let b = laplacian_coordinates(&l, moved.vertices());
        for (a, b) in a.iter().zip(&b) {
            assert!((t.rotation * a - b).norm() < 1e-14);
        }
    }

    #[test]
    fn isolated_vertex_is_an_error() {
        let v = vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()];
        let mesh = TriangleMesh::new(v, vec![[0, 1, 2]]).unwrap();
        assert!(uniform_laplacian(&mesh).is_err());
    }

    #[test]
    fn own_silhouette_is_a_fixed_point() {
        let mesh = icosphere(0.6, 3);
        let rig = ViewRig::icosahedron(128, 128).unwrap();
        let cs = own_silhouette(&mesh, &rig);
        let out = deform_to_contours(&mesh, &cs, &DeformParams::default()).unwrap();
        for (a, b) in mesh.vertices().iter().zip(out.mesh.vertices()) {
            assert!((a - b).norm() < 1e-6);
        }
        assert_eq!(out.mesh.triangles(), mesh.triangles());
    }

    #[test]
    fn zero_contour_weight_is_identity() {
        let mesh = icosphere(0.6, 2);
        let rig = single_view_rig();
        let cs = ContourConstraintSet::new(
            rig.clone(),
            vec![ContourRecord { view_index: 0, points: circle(&rig.cameras[0], 0.7, 64) }],
        )
        .unwrap();
        let params = DeformParams { contour_weight: 0.0, ..Default::default() };
        let out = deform_to_contours(&mesh, &cs, &params).unwrap();
        assert_eq!(out.mesh.vertices(), mesh.vertices());
    }

    #[test]
    fn inflated_contour_halves_the_residual() {
        let r = 0.6;
        let mesh = icosphere(r, 3);
        let rig = single_view_rig();
        let cs = ContourConstraintSet::new(
            rig.clone(),
            vec![ContourRecord { view_index: 0, points: circle(&rig.cameras[0], 1.1 * r, 256) }],
        )
        .unwrap();
        let before = silhouette_residual(&mesh, &cs);
        let out = deform_to_contours(&mesh, &cs, &DeformParams::default()).unwrap();
        let after = silhouette_residual(&out.mesh, &cs);
        assert!(after <= 0.5 * before, "before {before} after {after}");
    }

    #[test]
    fn contour_residual_is_monotone_in_contour_weight() {
        let mesh = icosphere(0.6, 2);
        let rig = single_view_rig();
        let cs = ContourConstraintSet::new(
            rig.clone(),
            vec![ContourRecord { view_index: 0, points: circle(&rig.cameras[0], 0.66, 128) }],
        )
        .unwrap();
        let mut last = f64::INFINITY;
        for w in [0.05, 0.2, 0.5, 2.0, 8.0] {
            let params = DeformParams { contour_weight: w, solver_tolerance: 1e-13, ..Default::default() };
            let out = deform_to_contours(&mesh, &cs, &params).unwrap();
            let (matches, _) = match_contours(mesh.vertices(), &mesh, &cs);
            let sq: f64 = matches
                .iter()
                .map(|m| {
                    let [x, y] = in_plane(&rig.cameras[0], &out.mesh.vertices()[m.vertex]);
                    (x - m.target[0]).powi(2) + (y - m.target[1]).powi(2)
                })
                .sum();
            assert!(sq <= last * (1.0 + 1e-9), "w {w}: {sq} > {last}");
            last = sq;
        }
    }

    #[test]
    fn deformation_is_rigidly_equivariant() {
        // Asymmetric inputs keep nearest-vertex matches free of ties.
        let mesh = bumpy_sphere(0.5, 2, 0.03, 7);
        let rig = single_view_rig();
        let points: Vec<[f64; 2]> =
            circle(&rig.cameras[0], 0.56, 97).iter().map(|p| [p[0] + 1.3, p[1] - 0.7]).collect();
        let params = DeformParams { solver_tolerance: 1e-14, ..Default::default() };
        let cs = ContourConstraintSet::new(rig.clone(), vec![ContourRecord { view_index: 0, points: points.clone() }])
            .unwrap();
        let a = deform_to_contours(&mesh, &cs, &params).unwrap();
        let t = RigidTransform::from_axis_angle(Vec3::new(0.2, 1.0, 0.4), 0.4, Vec3::new(0.05, -0.02, 0.01));
        let moved_rig = rig.transformed(&[t]);
        let cs2 = ContourConstraintSet::new(moved_rig, vec![ContourRecord { view_index: 0, points }]).unwrap();
        let b = deform_to_contours(&mesh.transformed(&t).unwrap(), &cs2, &params).unwrap();
        for (p, q) in a.mesh.vertices().iter().zip(b.mesh.vertices()) {
            assert!((t.apply(p) - q).norm() < 1e-6);
        }
    }

    #[test]
    fn contour_json_round_trip_and_validation() {
        let rig = single_view_rig();
        let cs = ContourConstraintSet::new(
            rig.clone(),
            vec![ContourRecord { view_index: 0, points: circle(&rig.cameras[0], 0.5, 16) }],
        )
        .unwrap();
        let back = ContourConstraintSet::from_json(&cs.to_json(), rig.clone()).unwrap();
        assert_eq!(back, cs);
        let few = vec![ContourRecord { view_index: 0, points: vec![[0.0, 0.0]; 3] }];
        assert!(ContourConstraintSet::new(rig.clone(), few).is_err());
        let bad_view = vec![ContourRecord { view_index: 5, points: vec![[0.0, 0.0]; 9] }];
        assert!(ContourConstraintSet::new(rig, bad_view).is_err());
    }

    #[test]
    fn open_boundary_vertices_count_as_silhouette() {
        let mesh = icosphere(0.5, 1);
        let rig = single_view_rig();
        assert!(!silhouette_vertices(&mesh, &rig.cameras[0]).is_empty());
        let flat = TriangleMesh::new(
            vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.1, 0.0, 0.0), Vec3::new(0.0, 0.1, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        assert_eq!(silhouette_vertices(&flat, &rig.cameras[0]), vec![0, 1, 2]);
    }
}

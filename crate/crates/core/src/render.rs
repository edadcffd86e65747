//! Ground-truth map synthesis by orthographic ray casting, controlled
//! perturbations for closed-loop tests, and silhouette contour tracing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Vec3};
use crate::maps::{normal_vec, ForegroundMask, Grid, MapSet, ViewMaps};
use crate::mesh::TriangleMesh;
use crate::views::{OrthographicCamera, ViewRig};

/// Camera-frame height the rays start from; the object lies inside the unit sphere.
const RAY_START: f64 = 2.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    /// Interpolate area-weighted vertex normals instead of face normals.
    pub smooth_normals: bool,
}

/// Renders every rig view of `mesh`.
pub fn render_mapset(mesh: &TriangleMesh, rig: &ViewRig, opts: RenderOptions) -> Result<MapSet> {
    let poses = vec![RigidTransform::identity(); rig.len()];
    render_mapset_moved(mesh, rig, &poses, opts)
}

/// Renders view `v` of the mesh moved by `object_motion[v]`. Used to
/// synthesize rigidly misregistered views.
pub fn render_mapset_moved(
    mesh: &TriangleMesh,
    rig: &ViewRig,
    object_motion: &[RigidTransform],
    opts: RenderOptions,
) -> Result<MapSet> {
    if object_motion.len() != rig.len() {
        return Err(Error::InvalidArgument("one motion per view required".into()));
    }
    if let Some((i, v)) = mesh.vertices().iter().enumerate().find(|(_, v)| v.norm() > 1.0 + 1e-12) {
        return Err(Error::InvalidMesh(format!(
            "vertex {i} lies outside the unit view sphere (|v| = {})",
            v.norm()
        )));
    }
    let smooth;
    let mesh = if opts.smooth_normals && mesh.vertex_normals().is_none() {
        smooth = mesh.with_smooth_normals();
        &smooth
    } else {
        mesh
    };
    let views = rig
        .cameras
        .par_iter()
        .zip(object_motion.par_iter())
        .map(|(cam, motion)| render_view(mesh, cam, motion))
        .collect();
    Ok(MapSet {
        rig: rig.clone(),
        views,
    })
}

fn render_view(mesh: &TriangleMesh, cam: &OrthographicCamera, motion: &RigidTransform) -> ViewMaps {
    let (w, h) = (cam.width, cam.height);
    let inv = motion.inverse();
    let dir_obj = inv.apply_vector(&cam.view_direction());
    let rows: Vec<Vec<Option<(f32, [f32; 3])>>> = (0..h)
        .into_par_iter()
        .map(|j| {
            (0..w)
                .map(|i| {
                    let origin = inv.apply(&cam.unproject(i as f64, j as f64, RAY_START));
                    mesh.ray_intersect(&origin, &dir_obj).map(|hit| {
                        let depth = RAY_START - hit.t;
                        let mut n = cam.rotate_to_camera(&motion.apply_vector(&hit.normal));
                        if n.z < 0.0 {
                            n = -n;
                        }
                        (depth as f32, [n.x as f32, n.y as f32, n.z as f32])
                    })
                })
                .collect()
        })
        .collect();
    let mut maps = ViewMaps::background(w, h);
    for (j, row) in rows.into_iter().enumerate() {
        for (i, px) in row.into_iter().enumerate() {
            if let Some((d, n)) = px {
                maps.mask.set(i, j, true);
                maps.depth.set(i, j, d);
                maps.normal.set(i, j, n);
            }
        }
    }
    maps
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationSpec {
    /// Constant added to every foreground depth.
    pub depth_offset: f64,
    /// Per-view bias drawn from `U(-view_bias, view_bias)`.
    pub view_bias: f64,
    /// Per-pixel Gaussian depth noise standard deviation.
    pub depth_noise: f64,
    /// Per-view rigid jitter: maximum rotation angle in degrees.
    pub jitter_degrees: f64,
    /// Per-view rigid jitter: maximum translation length.
    pub jitter_translation: f64,
    /// Standard deviation of the normal rotation angle, radians.
    pub normal_noise: f64,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("depth_offset", self.depth_offset.abs()),
            ("view_bias", self.view_bias),
            ("depth_noise", self.depth_noise),
            ("jitter_degrees", self.jitter_degrees),
            ("jitter_translation", self.jitter_translation),
            ("normal_noise", self.normal_noise),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be a finite non-negative value")));
            }
        }
        Ok(())
    }

    /// Parses `key=value` pairs separated by commas, e.g. `bias=0.02,noise=0.005`.
    pub fn parse_overrides(&mut self, text: &str) -> Result<()> {
        for pair in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("expected key=value, got {pair:?}")))?;
            let val: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad number in {pair:?}")))?;
            match k.trim() {
                "offset" => self.depth_offset = val,
                "bias" => self.view_bias = val,
                "noise" => self.depth_noise = val,
                "jitter_deg" => self.jitter_degrees = val,
                "jitter_trans" => self.jitter_translation = val,
                "normal_noise" => self.normal_noise = val,
                other => return Err(Error::InvalidArgument(format!("unknown perturbation key {other:?}"))),
            }
        }
        self.validate()
    }

    fn view_rng(&self, view: usize, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream * 1024 + view as u64);
        rng
    }

    /// Per-view object motions for the rigid jitter component.
    pub fn sample_jitter(&self, views: usize) -> Vec<RigidTransform> {
        (0..views)
            .map(|v| {
                if self.jitter_degrees == 0.0 && self.jitter_translation == 0.0 {
                    return RigidTransform::identity();
                }
                let mut rng = self.view_rng(v, 2);
                let axis = random_unit(&mut rng);
                let angle = rng.random_range(0.0..=1.0) * self.jitter_degrees.to_radians();
                let dir = random_unit(&mut rng);
                let len = rng.random_range(0.0..=1.0) * self.jitter_translation;
                RigidTransform::from_axis_angle(axis, angle, dir * len)
            })
            .collect()
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-6 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Applies depth offset, per-view bias, per-pixel noise and normal noise.
/// Masks are untouched; rigid jitter needs geometry and is handled by
/// [`synthesize_mapset`].
pub fn perturb_mapset(m: &MapSet, spec: &PerturbationSpec) -> Result<MapSet> {
    spec.validate()?;
    let views = m
        .views
        .par_iter()
        .enumerate()
        .map(|(v, maps)| perturb_view(maps, spec, v))
        .collect();
    Ok(MapSet {
        rig: m.rig.clone(),
        views,
    })
}

fn perturb_view(maps: &ViewMaps, spec: &PerturbationSpec, v: usize) -> ViewMaps {
    let mut out = maps.clone();
    let bias = if spec.view_bias > 0.0 {
        spec.view_rng(v, 0).random_range(-spec.view_bias..=spec.view_bias)
    } else {
        0.0
    };
    let shift = spec.depth_offset + bias;
    let mut rng = spec.view_rng(v, 1);
    let depth_noise = (spec.depth_noise > 0.0).then(|| Normal::new(0.0, spec.depth_noise).unwrap());
    let normal_noise = (spec.normal_noise > 0.0).then(|| Normal::new(0.0, spec.normal_noise).unwrap());
    if shift == 0.0 && depth_noise.is_none() && normal_noise.is_none() {
        return out;
    }
    let (w, h) = (maps.mask.width(), maps.mask.height());
    for j in 0..h {
        for i in 0..w {
            if !maps.mask.is_fg(i, j) {
                continue;
            }
            let mut d = *maps.depth.get(i, j) as f64 + shift;
            if let Some(nd) = &depth_noise {
                d += nd.sample(&mut rng);
            }
            out.depth.set(i, j, d.clamp(-1.0, 1.0) as f32);
            if let Some(nn) = &normal_noise {
                let n = normal_vec(maps.normal.get(i, j));
                let angle = nn.sample(&mut rng);
                let mut axis = n.cross(&random_unit(&mut rng));
                if axis.norm() < 1e-9 {
                    axis = n.cross(&Vec3::x());
                }
                let axis = axis.normalize();
                let r = (n * angle.cos() + axis.cross(&n) * angle.sin()).normalize();
                out.normal.set(i, j, [r.x as f32, r.y as f32, r.z as f32]);
            }
        }
    }
    out
}

/// Renders with the rigid jitter of `spec` then applies the pixel perturbations.
pub fn synthesize_mapset(
    mesh: &TriangleMesh,
    rig: &ViewRig,
    spec: &PerturbationSpec,
    opts: RenderOptions,
) -> Result<MapSet> {
    spec.validate()?;
    let motions = spec.sample_jitter(rig.len());
    let clean = render_mapset_moved(mesh, rig, &motions, opts)?;
    perturb_mapset(&clean, spec)
}

/// 8-connected components of the foreground; returns the label grid and
/// the size of each component (labels are 1-based, 0 = background).
fn label_components(mask: &ForegroundMask) -> (Grid<u32>, Vec<usize>) {
    let (w, h) = (mask.width(), mask.height());
    let mut labels = Grid::filled(w, h, 0u32);
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for j in 0..h {
        for i in 0..w {
            if !mask.is_fg(i, j) || *labels.get(i, j) != 0 {
                continue;
            }
            let label = sizes.len() as u32 + 1;
            let mut size = 0;
            labels.set(i, j, label);
            stack.push((i, j));
            while let Some((x, y)) = stack.pop() {
                size += 1;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let (nx, ny) = (nx as usize, ny as usize);
                        if mask.is_fg(nx, ny) && *labels.get(nx, ny) == 0 {
                            labels.set(nx, ny, label);
                            stack.push((nx, ny));
                        }
                    }
                }
            }
            sizes.push(size);
        }
    }
    (labels, sizes)
}

/// Outer boundary of the largest 8-connected foreground component, as the
/// ordered (counter-clockwise) midpoints of its boundary pixel edges, in
/// continuous pixel coordinates (pixel `(i, j)` centered at `(i, j)`).
pub fn extract_silhouette_contour(mask: &ForegroundMask) -> Result<Vec<[f64; 2]>> {
    let (labels, sizes) = label_components(mask);
    let Some((best, _)) = sizes
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, usize)>, (k, &s)| match acc {
            Some((_, bs)) if bs >= s => acc,
            _ => Some((k, s)),
        })
    else {
        return Err(Error::InvalidArgument("mask has no foreground pixels".into()));
    };
    let label = best as u32 + 1;
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && *labels.get(x as usize, y as usize) == label;

    // Lowest row, then lowest column: its bottom edge is on the outer boundary.
    let start = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .find(|&(x, y)| inside(x, y))
        .unwrap();
    // Lattice vertex (x, y) is the lower-left corner of pixel (x, y).
    let dirs = [(1i64, 0i64), (0, 1), (-1, 0), (0, -1)];
    let (mut vx, mut vy, mut d) = (start.0, start.1, 0usize);
    let mut out = Vec::new();
    loop {
        let (dx, dy) = dirs[d];
        let (nx, ny) = (vx + dx, vy + dy);
        out.push([(vx + nx) as f64 * 0.5 - 0.5, (vy + ny) as f64 * 0.5 - 0.5]);
        // Pixels ahead of the vertex (nx, ny): left-ahead and right-ahead of travel.
        let (al, ar) = match d {
            0 => ((nx, ny), (nx, ny - 1)),
            1 => ((nx - 1, ny), (nx, ny)),
            2 => ((nx - 1, ny - 1), (nx - 1, ny)),
            _ => ((nx, ny - 1), (nx - 1, ny - 1)),
        };
        d = if inside(ar.0, ar.1) {
            (d + 3) % 4
        } else if inside(al.0, al.1) {
            d
        } else {
            (d + 1) % 4
        };
        vx = nx;
        vy = ny;
        if (vx, vy, d) == (start.0, start.1, 0) {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::validate_mapset;
    use crate::primitives;

    fn mask_from(w: usize, h: usize, f: impl Fn(usize, usize) -> bool) -> ForegroundMask {
        let mut m = Grid::filled(w, h, false);
        for j in 0..h {
            for i in 0..w {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    #[test]
    fn sphere_center_depth_is_radius() {
        let mesh = primitives::icosphere(0.8, 4);
        let sag = primitives::icosphere_sagitta(0.8, 4);
        let rig = ViewRig::icosahedron(32, 32).unwrap();
        let m = render_mapset(&mesh, &rig, RenderOptions::default()).unwrap();
        assert!(validate_mapset(&m).is_empty());
        for v in &m.views {
            // Pixel (15.5, 15.5) is the image center; sample the four pixels around it.
            for (i, j) in [(15, 15), (16, 16)] {
                let d = *v.depth.get(i, j) as f64;
                assert!(v.mask.is_fg(i, j));
                assert!((d - 0.8).abs() <= sag + 1e-3, "{d}");
            }
            // Corners miss: background with zero depth.
            assert!(!v.mask.is_fg(0, 0));
            assert_eq!(*v.depth.get(0, 0), 0.0);
            for j in 0..32 {
                for i in 0..32 {
                    if v.mask.is_fg(i, j) {
                        assert!(v.normal.get(i, j)[2] > 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn frontal_box_face_normal() {
        let mesh = primitives::box_mesh(Vec3::repeat(-0.3), Vec3::repeat(0.3));
        let cam = OrthographicCamera::new(RigidTransform::identity(), 2.0 / 64.0, 64, 64).unwrap();
        let rig = ViewRig { cameras: vec![cam], up_axis: Vec3::y() };
        let m = render_mapset(&mesh, &rig, RenderOptions::default()).unwrap();
        let n = m.views[0].normal.get(32, 32);
        assert_eq!(*n, [0.0, 0.0, 1.0]);
        assert!((*m.views[0].depth.get(32, 32) as f64 - 0.3).abs() < 1e-7);
    }

    #[test]
    fn outside_unit_sphere_is_error() {
        let mesh = primitives::icosphere(1.2, 1);
        let rig = ViewRig::icosahedron(8, 8).unwrap();
        assert!(render_mapset(&mesh, &rig, RenderOptions::default()).is_err());
    }

    #[test]
    fn zero_spec_is_identity_and_offset_is_exact() {
        let mesh = primitives::icosphere(0.5, 2);
        let rig = ViewRig::icosahedron(24, 24).unwrap();
        let m = render_mapset(&mesh, &rig, RenderOptions::default()).unwrap();
        assert!(perturb_mapset(&m, &PerturbationSpec::default()).unwrap().bitwise_eq(&m));
        let spec = PerturbationSpec { depth_offset: 0.05, ..Default::default() };
        let p = perturb_mapset(&m, &spec).unwrap();
        for (a, b) in m.views.iter().zip(&p.views) {
            assert_eq!(a.mask, b.mask);
            for (x, y) in a.depth.data().iter().zip(b.depth.data()) {
                if *x != 0.0 {
                    assert_eq!(*y, (*x as f64 + 0.05) as f32);
                }
            }
        }
    }

    #[test]
    fn depth_noise_has_requested_spread() {
        let mesh = primitives::icosphere(0.8, 3);
        let rig = ViewRig::icosahedron(48, 48).unwrap();
        let m = render_mapset(&mesh, &rig, RenderOptions::default()).unwrap();
        let spec = PerturbationSpec { depth_noise: 0.01, seed: 17, ..Default::default() };
        let p = perturb_mapset(&m, &spec).unwrap();
        let mut diffs = Vec::new();
        for (a, b) in m.views.iter().zip(&p.views) {
            for k in 0..a.depth.data().len() {
                if a.mask.data()[k] {
                    diffs.push(b.depth.data()[k] as f64 - a.depth.data()[k] as f64);
                }
            }
        }
        assert!(diffs.len() >= 10_000);
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64;
        let sd = var.sqrt();
        assert!((0.009..=0.011).contains(&sd), "{sd}");
        assert!(perturb_mapset(&m, &spec).unwrap().bitwise_eq(&p));
    }

    #[test]
    fn normal_noise_keeps_unit_length() {
        let mesh = primitives::icosphere(0.8, 2);
        let rig = ViewRig::icosahedron(16, 16).unwrap();
        let m = render_mapset(&mesh, &rig, RenderOptions::default()).unwrap();
        let spec = PerturbationSpec { normal_noise: 0.05, seed: 1, ..Default::default() };
        let p = perturb_mapset(&m, &spec).unwrap();
        assert!(validate_mapset(&p).is_empty());
        assert!(!p.bitwise_eq(&m));
    }

    #[test]
    fn contour_of_square() {
        let m = mask_from(10, 10, |i, j| (2..=7).contains(&i) && (2..=7).contains(&j));
        let c = extract_silhouette_contour(&m).unwrap();
        assert_eq!(c.len(), 24);
        assert_eq!(c[0], [2.0, 1.5]);
        // Every point sits on the square's boundary.
        for p in &c {
            let on_x = (p[0] == 1.5 || p[0] == 7.5) && (1.5..=7.5).contains(&p[1]);
            let on_y = (p[1] == 1.5 || p[1] == 7.5) && (1.5..=7.5).contains(&p[0]);
            assert!(on_x || on_y, "{p:?}");
        }
    }

    #[test]
    fn contour_of_single_pixel() {
        let m = mask_from(5, 5, |i, j| i == 2 && j == 3);
        let c = extract_silhouette_contour(&m).unwrap();
        assert_eq!(c, vec![[2.0, 2.5], [2.5, 3.0], [2.0, 3.5], [1.5, 3.0]]);
    }

    #[test]
    fn contour_of_disk_and_largest_component() {
        let r = 50.0;
        let m = mask_from(128, 128, |i, j| {
            let (x, y) = (i as f64 - 64.0, j as f64 - 64.0);
            (x * x + y * y <= r * r) || (i < 3 && j < 3)
        });
        let c = extract_silhouette_contour(&m).unwrap();
        let expected = 2.0 * std::f64::consts::PI * r * (4.0 / std::f64::consts::PI);
        assert!(((c.len() as f64) - expected).abs() <= 0.1 * expected, "{}", c.len());
        // The small corner blob is ignored.
        assert!(c.iter().all(|p| p[0] > 5.0 || p[1] > 5.0));
    }

    #[test]
    fn diagonal_pixels_form_one_contour() {
        let m = mask_from(4, 4, |i, j| (i, j) == (1, 1) || (i, j) == (2, 2));
        let c = extract_silhouette_contour(&m).unwrap();
        assert_eq!(c.len(), 8);
    }

    #[test]
    fn empty_mask_is_error() {
        assert!(extract_silhouette_contour(&mask_from(4, 4, |_, _| false)).is_err());
    }
}

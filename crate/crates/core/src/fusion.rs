//! Joint multi-view depth optimization.
//!
//! The unknowns are the depths of all foreground pixels of all views. The
//! energy has three parts:
//!
//! * `E_net  = w1 Σ (d − d̃)²` keeps depths near the predicted maps;
//! * `E_orth = w2 Σ (t_x·ñ)² + (t_y·ñ)²` asks depth-derived tangents
//!   `t_x = [κ, 0, ∂d/∂x]`, `t_y = [0, κ, ∂d/∂y]` to be orthogonal to the
//!   predicted normals (silhouette pixels excluded);
//! * `E_cons` couples each pixel to the pixel its 3D point lands on in every
//!   other view where it is visible: `w3 (d' − d_{v'}(q))²` plus
//!   `w4 [(t'_x·n')² + (t'_y·n')²]` with the point's normal `n'` expressed in
//!   the other camera.
//!
//! With correspondences frozen every residual is affine in the depths, so
//! each outer iteration is one sparse linear least-squares solve; the
//! correspondences are then rebuilt from the moved points.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::maps::{normal_vec, DepthMap, ForegroundMask, Grid, MapSet};
use crate::pointcloud::OrientedPointCloud;
use crate::pointgen::silhouette_pixels;
use crate::sparse::{det_sum, solve_normal_equations, LeastSquares};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    /// Depth slack of the visibility test; `None` means four pixels (4κ).
    pub occlusion_threshold: Option<f64>,
    pub outer_iterations: usize,
    /// Stop early once the relative change of the total energy falls below this.
    pub early_exit: f64,
    pub solver_tolerance: f64,
    pub solver_max_iterations: usize,
    pub target_sampling: TargetSampling,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            w1: 1.0,
            w2: 1.0,
            w3: 0.3,
            w4: 0.3,
            occlusion_threshold: None,
            outer_iterations: 5,
            early_exit: 1e-4,
            solver_tolerance: 1e-8,
            solver_max_iterations: 2000,
            target_sampling: TargetSampling::Bilinear,
        }
    }
}

/// How the target-side depth of a consistency residual is read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSampling {
    /// Depth of the rounded target pixel.
    Nearest,
    /// Bilinear depth at the exact projected position; the residual is
    /// dropped when the surrounding 2×2 cell is not all interior foreground.
    #[default]
    Bilinear,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w1", self.w1), ("w2", self.w2), ("w3", self.w3), ("w4", self.w4)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be non-negative")));
            }
        }
        if let Some(t) = self.occlusion_threshold {
            if !(t > 0.0) {
                return Err(Error::InvalidArgument("occlusion threshold must be positive".into()));
            }
        }
        if self.outer_iterations == 0 {
            return Err(Error::InvalidArgument("at least one outer iteration is required".into()));
        }
        if !(self.solver_tolerance > 0.0) || self.solver_max_iterations == 0 {
            return Err(Error::InvalidArgument("solver tolerance and iteration cap must be positive".into()));
        }
        Ok(())
    }

    pub fn occlusion_threshold_for(&self, kappa: f64) -> f64 {
        self.occlusion_threshold.unwrap_or(4.0 * kappa)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

/// Depth-derivative stencil at `(i, j)`: central difference when both
/// neighbors are foreground, one-sided when exactly one is, `None` otherwise.
/// Entries are `(i, j, weight)`.
pub fn derivative_stencil(mask: &ForegroundMask, i: usize, j: usize, axis: Axis) -> Option<[(usize, usize, f64); 2]> {
    stencil_where(mask.width(), mask.height(), i, j, axis, |a, b| mask.is_fg(a, b))
}

fn stencil_where(
    w: usize,
    h: usize,
    i: usize,
    j: usize,
    axis: Axis,
    usable: impl Fn(usize, usize) -> bool,
) -> Option<[(usize, usize, f64); 2]> {
    let (prev, next) = match axis {
        Axis::X => (
            (i > 0 && usable(i - 1, j)).then(|| (i - 1, j)),
            (i + 1 < w && usable(i + 1, j)).then(|| (i + 1, j)),
        ),
        Axis::Y => (
            (j > 0 && usable(i, j - 1)).then(|| (i, j - 1)),
            (j + 1 < h && usable(i, j + 1)).then(|| (i, j + 1)),
        ),
    };
    match (prev, next) {
        (Some(p), Some(n)) => Some([(n.0, n.1, 0.5), (p.0, p.1, -0.5)]),
        (None, Some(n)) => Some([(n.0, n.1, 1.0), (i, j, -1.0)]),
        (Some(p), None) => Some([(i, j, 1.0), (p.0, p.1, -1.0)]),
        (None, None) => None,
    }
}

/// Foreground pixels with an 8-neighbor that is background, outside the
/// image, or across a depth jump of at least `jump`.
pub fn depth_silhouette_pixels(mask: &ForegroundMask, depth: &DepthMap, jump: f64) -> Grid<bool> {
    let mut out = silhouette_pixels(mask);
    let (w, h) = (mask.width(), mask.height());
    for j in 0..h {
        for i in 0..w {
            if !mask.is_fg(i, j) || *out.get(i, j) {
                continue;
            }
            let d = *depth.get(i, j) as f64;
            let jumps = (j - 1..=j + 1)
                .flat_map(|b| (i - 1..=i + 1).map(move |a| (a, b)))
                .any(|(a, b)| (*depth.get(a, b) as f64 - d).abs() >= jump);
            out.set(i, j, jumps);
        }
    }
    out
}

fn tangents_with(depth: impl Fn(usize, usize) -> f64, mask: &ForegroundMask, kappa: f64, i: usize, j: usize) -> Option<(Vec3, Vec3)> {
    if !mask.is_fg(i, j) {
        return None;
    }
    let diff = |axis| {
        derivative_stencil(mask, i, j, axis).map(|s| s.iter().map(|&(a, b, w)| w * depth(a, b)).sum::<f64>())
    };
    let dx = diff(Axis::X)?;
    let dy = diff(Axis::Y)?;
    Some((Vec3::new(kappa, 0.0, dx), Vec3::new(0.0, kappa, dy)))
}

/// Surface tangents `(t_x, t_y)` at a foreground pixel from first-order
/// depth derivatives.
pub fn tangents(depth: &DepthMap, mask: &ForegroundMask, kappa: f64, i: usize, j: usize) -> Option<(Vec3, Vec3)> {
    tangents_with(|a, b| *depth.get(a, b) as f64, mask, kappa, i, j)
}

/// The 2×2 cell around `pixel + offset` with bilinear weights, if all four
/// pixels are interior foreground.
fn bilinear_cell(
    mask: &ForegroundMask,
    silhouette: &Grid<bool>,
    pixel: (usize, usize),
    offset: [f64; 2],
) -> Option<[(usize, usize, f64); 4]> {
    let x = pixel.0 as f64 + offset[0];
    let y = pixel.1 as f64 + offset[1];
    let (x0, y0) = (x.floor(), y.floor());
    if x0 < 0.0 || y0 < 0.0 {
        return None;
    }
    let (i0, j0) = (x0 as usize, y0 as usize);
    if i0 + 1 >= mask.width() || j0 + 1 >= mask.height() {
        return None;
    }
    let (fx, fy) = (x - x0, y - y0);
    let cell = [
        (i0, j0, (1.0 - fx) * (1.0 - fy)),
        (i0 + 1, j0, fx * (1.0 - fy)),
        (i0, j0 + 1, (1.0 - fx) * fy),
        (i0 + 1, j0 + 1, fx * fy),
    ];
    cell.iter()
        .all(|&(a, b, _)| mask.is_fg(a, b) && !*silhouette.get(a, b))
        .then_some(cell)
}

struct Sample {
    ids: [u32; 4],
    weights: [f64; 4],
    value: f64,
    /// Derivative of `value` with respect to the source depth through the
    /// motion of the projected position.
    slope: f64,
}

/// A pixel of one view projecting onto a visible foreground pixel of another.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub source_view: usize,
    pub source_pixel: (usize, usize),
    pub target_view: usize,
    pub target_pixel: (usize, usize),
    pub source_unknown: usize,
    pub target_unknown: usize,
    /// The point's depth in the target view is `alpha · d_source + beta`.
    pub alpha: f64,
    pub beta: f64,
    /// Source normal expressed in the target camera frame.
    pub normal: Vec3,
    /// Projected position minus the target pixel, each in `[-0.5, 0.5]`.
    pub offset: [f64; 2],
}

/// Foreground pixels of a map set numbered view by view, row by row.
#[derive(Clone, Debug)]
struct Unknowns {
    grids: Vec<Grid<u32>>,
    pixels: Vec<(usize, usize, usize)>,
}

const NONE: u32 = u32::MAX;

impl Unknowns {
    fn new(m: &MapSet) -> Self {
        let mut grids = Vec::with_capacity(m.views.len());
        let mut pixels = Vec::with_capacity(m.foreground_count());
        for (v, maps) in m.views.iter().enumerate() {
            let (w, h) = (maps.mask.width(), maps.mask.height());
            let mut g = Grid::filled(w, h, NONE);
            for j in 0..h {
                for i in 0..w {
                    if maps.mask.is_fg(i, j) {
                        g.set(i, j, pixels.len() as u32);
                        pixels.push((v, i, j));
                    }
                }
            }
            grids.push(g);
        }
        Unknowns { grids, pixels }
    }

    #[inline]
    fn id(&self, v: usize, i: usize, j: usize) -> usize {
        *self.grids[v].get(i, j) as usize
    }

    fn len(&self) -> usize {
        self.pixels.len()
    }
}

/// Energy split by term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub e_net: f64,
    pub e_orth: f64,
    pub e_cons: f64,
    pub total: f64,
}

/// Row ranges of the assembled system, in order.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemLayout {
    pub net: std::ops::Range<usize>,
    pub orth: std::ops::Range<usize>,
    pub cons_depth: std::ops::Range<usize>,
    pub cons_tangent: std::ops::Range<usize>,
}

/// The frozen-correspondence linear least-squares system.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionSystem {
    pub ls: LeastSquares,
    pub layout: SystemLayout,
    /// Unknown owning each orthogonality row.
    pub orth_owners: Vec<usize>,
    /// Target unknown owning each consistency-tangent row.
    pub tangent_owners: Vec<usize>,
}

impl FusionSystem {
    pub fn breakdown(&self, depths: &[f64]) -> EnergyBreakdown {
        let r = self.ls.residuals(depths);
        let sq = |range: &std::ops::Range<usize>| {
            let part: Vec<f64> = r[range.clone()].iter().map(|x| x * x).collect();
            det_sum(&part)
        };
        let e_net = sq(&self.layout.net);
        let e_orth = sq(&self.layout.orth);
        let e_cons = sq(&self.layout.cons_depth) + sq(&self.layout.cons_tangent);
        EnergyBreakdown {
            e_net,
            e_orth,
            e_cons,
            total: e_net + e_orth + e_cons,
        }
    }
}

/// A map set prepared for optimization: unknown numbering, predicted depths
/// and normals, silhouette flags.
#[derive(Clone, Debug)]
pub struct FusionProblem<'a> {
    maps: &'a MapSet,
    unknowns: Unknowns,
    predicted: Vec<f64>,
    /// Camera-frame unit normals per unknown.
    normals: Vec<Vec3>,
    silhouettes: Vec<Grid<bool>>,
    kappa: f64,
    tau: f64,
    config: FusionConfig,
}

impl<'a> FusionProblem<'a> {
    pub fn new(maps: &'a MapSet, config: &FusionConfig) -> Result<Self> {
        config.validate()?;
        let unknowns = Unknowns::new(maps);
        let predicted = unknowns
            .pixels
            .iter()
            .map(|&(v, i, j)| *maps.views[v].depth.get(i, j) as f64)
            .collect();
        let normals = unknowns
            .pixels
            .iter()
            .map(|&(v, i, j)| {
                let n = normal_vec(maps.views[v].normal.get(i, j));
                let l = n.norm();
                if l > 0.0 {
                    n / l
                } else {
                    Vec3::z()
                }
            })
            .collect();
        let kappa = maps.rig.kappa();
        let tau = config.occlusion_threshold_for(kappa);
        let silhouettes = maps
            .views
            .par_iter()
            .map(|v| depth_silhouette_pixels(&v.mask, &v.depth, tau))
            .collect();
        Ok(FusionProblem {
            maps,
            unknowns,
            predicted,
            normals,
            silhouettes,
            kappa,
            tau,
            config: *config,
        })
    }

    pub fn n_unknowns(&self) -> usize {
        self.unknowns.len()
    }

    pub fn predicted_depths(&self) -> &[f64] {
        &self.predicted
    }

    /// `(view, i, j)` of each unknown.
    pub fn pixel_of(&self, unknown: usize) -> (usize, usize, usize) {
        self.unknowns.pixels[unknown]
    }

    pub fn is_silhouette(&self, unknown: usize) -> bool {
        let (v, i, j) = self.unknowns.pixels[unknown];
        *self.silhouettes[v].get(i, j)
    }

    /// Derivative stencil restricted to foreground neighbors on the same
    /// side of any predicted depth jump.
    fn stencil(&self, v: usize, i: usize, j: usize, axis: Axis) -> Option<[(usize, usize, f64); 2]> {
        let maps = &self.maps.views[v];
        let d = *maps.depth.get(i, j) as f64;
        stencil_where(maps.mask.width(), maps.mask.height(), i, j, axis, |a, b| {
            maps.mask.is_fg(a, b) && ((*maps.depth.get(a, b) as f64) - d).abs() < self.tau
        })
    }

    fn tangents_at(&self, v: usize, i: usize, j: usize, depths: &[f64]) -> Option<(Vec3, Vec3)> {
        let diff = |axis| {
            self.stencil(v, i, j, axis)
                .map(|s| s.iter().map(|&(a, b, w)| w * depths[self.unknowns.id(v, a, b)]).sum::<f64>())
        };
        Some((Vec3::new(self.kappa, 0.0, diff(Axis::X)?), Vec3::new(0.0, self.kappa, diff(Axis::Y)?)))
    }

    /// Visible-pixel correspondences for the given depths.
    pub fn correspondences(&self, depths: &[f64]) -> Vec<Correspondence> {
        let m = self.maps;
        let cams = &m.rig.cameras;
        let per_view: Vec<Vec<Correspondence>> = (0..m.views.len())
            .into_par_iter()
            .map(|v| {
                let cam = &cams[v];
                let zv = cam.z_axis();
                let mut out = Vec::new();
                let mask = &m.views[v].mask;
                let (w, h) = (mask.width(), mask.height());
                for j in 0..h {
                    for i in 0..w {
                        if !mask.is_fg(i, j) {
                            continue;
                        }
                        let src = self.unknowns.id(v, i, j);
                        let d = depths[src];
                        let q = cam.unproject(i as f64, j as f64, d);
                        let n_obj = cam.pose.apply_vector(&self.normals[src]);
                        for (vt, cam_t) in cams.iter().enumerate() {
                            if vt == v {
                                continue;
                            }
                            let (px, py, z) = cam_t.project(&q);
                            let Some((it, jt)) = cam_t.pixel_of(px, py) else { continue };
                            if !m.views[vt].mask.is_fg(it, jt) {
                                continue;
                            }
                            let tgt = self.unknowns.id(vt, it, jt);
                            let offset = [px - it as f64, py - jt as f64];
                            let sampled = match self.config.target_sampling {
                                TargetSampling::Bilinear => {
                                    bilinear_cell(&m.views[vt].mask, &self.silhouettes[vt], (it, jt), offset)
                                        .map(|cell| cell.iter().map(|&(a, b, w)| w * depths[self.unknowns.id(vt, a, b)]).sum())
                                }
                                TargetSampling::Nearest => None,
                            };
                            if (sampled.unwrap_or(depths[tgt]) - z).abs() >= self.tau {
                                continue;
                            }
                            // Hidden behind any sample around the exact projection,
                            // e.g. when the rounded pixel looks past a depth jump.
                            if self.occluded(vt, px, py, z, depths) {
                                continue;
                            }
                            let normal = cam_t.rotate_to_camera(&n_obj);
                            // A surface point facing away from the target camera is not visible there.
                            if normal.z <= 0.0 {
                                continue;
                            }
                            let alpha = cam_t.z_axis().dot(&zv);
                            out.push(Correspondence {
                                source_view: v,
                                source_pixel: (i, j),
                                target_view: vt,
                                target_pixel: (it, jt),
                                source_unknown: src,
                                target_unknown: tgt,
                                alpha,
                                beta: z - alpha * d,
                                normal,
                                offset,
                            });
                        }
                    }
                }
                out
            })
            .collect();
        per_view.into_iter().flatten().collect()
    }

    /// Whether a foreground sample of the 2×2 cell around `(px, py)` in view
    /// `vt` lies more than the occlusion slack in front of depth `z`.
    fn occluded(&self, vt: usize, px: f64, py: f64, z: f64, depths: &[f64]) -> bool {
        let mask = &self.maps.views[vt].mask;
        let (x0, y0) = (px.floor(), py.floor());
        for (a, b) in [(x0, y0), (x0 + 1.0, y0), (x0, y0 + 1.0), (x0 + 1.0, y0 + 1.0)] {
            if a < 0.0 || b < 0.0 || a >= mask.width() as f64 || b >= mask.height() as f64 {
                continue;
            }
            let (a, b) = (a as usize, b as usize);
            if mask.is_fg(a, b) && depths[self.unknowns.id(vt, a, b)] - z > self.tau {
                return true;
            }
        }
        false
    }

    fn tangent_rows(&self, ls: &mut LeastSquares, view: usize, i: usize, j: usize, n: &Vec3, sqrt_w: f64) -> bool {
        let (Some(sx), Some(sy)) = (self.stencil(view, i, j, Axis::X), self.stencil(view, i, j, Axis::Y)) else {
            return false;
        };
        for (stencil, in_plane) in [(sx, n.x), (sy, n.y)] {
            let entries: Vec<(u32, f64)> = stencil
                .iter()
                .map(|&(a, b, wt)| (self.unknowns.id(view, a, b) as u32, sqrt_w * n.z * wt))
                .collect();
            ls.push(&entries, -sqrt_w * self.kappa * in_plane);
        }
        true
    }

    /// Bilinear target depth at the current projection of the source point,
    /// over the cell chosen when the correspondence was built.
    fn sample(&self, c: &Correspondence, depths: &[f64]) -> Option<Sample> {
        let mask = &self.maps.views[c.target_view].mask;
        let cell = bilinear_cell(mask, &self.silhouettes[c.target_view], c.target_pixel, c.offset)?;
        let cam = &self.maps.rig.cameras[c.source_view];
        let cam_t = &self.maps.rig.cameras[c.target_view];
        let (i, j) = c.source_pixel;
        let q = cam.unproject(i as f64, j as f64, depths[c.source_unknown]);
        let (px, py, _) = cam_t.project(&q);
        let (fx, fy) = (px - cell[0].0 as f64, py - cell[0].1 as f64);
        let ids = cell.map(|(a, b, _)| self.unknowns.id(c.target_view, a, b) as u32);
        let [d00, d10, d01, d11] = ids.map(|k| depths[k as usize]);
        let weights = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
        let value = weights[0] * d00 + weights[1] * d10 + weights[2] * d01 + weights[3] * d11;
        let gx = (1.0 - fy) * (d10 - d00) + fy * (d11 - d01);
        let gy = (1.0 - fx) * (d01 - d00) + fx * (d11 - d10);
        // Pixel motion of the projection per unit source depth.
        let zs = cam.z_axis();
        let rt = &cam_t.pose.rotation;
        let slope = (gx * rt.column(0).dot(&zs) + gy * rt.column(1).dot(&zs)) / cam_t.kappa;
        Some(Sample { ids, weights, value, slope })
    }

    /// Affine depth-consistency residual of a correspondence, linearized at
    /// `depths`: `(entries, rhs)` with residual `Σ entries·d − rhs`.
    fn depth_row(&self, c: &Correspondence, depths: &[f64]) -> Option<(Vec<(u32, f64)>, f64)> {
        let src = c.source_unknown as u32;
        match self.config.target_sampling {
            TargetSampling::Nearest => Some((vec![(c.target_unknown as u32, 1.0), (src, -c.alpha)], c.beta)),
            TargetSampling::Bilinear => {
                let s = self.sample(c, depths)?;
                let mut row: Vec<(u32, f64)> = s.ids.iter().copied().zip(s.weights).collect();
                row.push((src, s.slope - c.alpha));
                Some((row, s.slope * depths[c.source_unknown] + c.beta))
            }
        }
    }

    /// Assembles the linear system for frozen correspondences, linearized at
    /// `depths`.
    pub fn assemble(&self, corrs: &[Correspondence], depths: &[f64]) -> FusionSystem {
        let n = self.n_unknowns();
        let cfg = &self.config;
        let mut ls = LeastSquares::new(n);
        let s1 = cfg.w1.sqrt();
        for (k, &d) in self.predicted.iter().enumerate() {
            ls.push(&[(k as u32, s1)], s1 * d);
        }
        let net = 0..ls.n_rows();

        let s2 = cfg.w2.sqrt();
        let orth_parts: Vec<(LeastSquares, Vec<usize>)> = (0..self.maps.views.len())
            .into_par_iter()
            .map(|v| {
                let mut part = LeastSquares::new(n);
                let mut owners = Vec::new();
                if s2 == 0.0 {
                    return (part, owners);
                }
                for (k, &(pv, i, j)) in self.unknowns.pixels.iter().enumerate() {
                    if pv != v || *self.silhouettes[v].get(i, j) {
                        continue;
                    }
                    if self.tangent_rows(&mut part, v, i, j, &self.normals[k], s2) {
                        owners.extend([k, k]);
                    }
                }
                (part, owners)
            })
            .collect();
        let mut orth_owners = Vec::new();
        for (part, owners) in &orth_parts {
            ls.append(part);
            orth_owners.extend_from_slice(owners);
        }
        let orth = net.end..ls.n_rows();

        let s3 = cfg.w3.sqrt();
        if s3 > 0.0 {
            let parts: Vec<LeastSquares> = corrs
                .par_chunks(8192)
                .map(|chunk| {
                    let mut part = LeastSquares::new(n);
                    for c in chunk {
                        let Some((row, rhs)) = self.depth_row(c, depths) else { continue };
                        let row: Vec<(u32, f64)> = row.into_iter().map(|(k, w)| (k, s3 * w)).collect();
                        part.push(&row, s3 * rhs);
                    }
                    part
                })
                .collect();
            for part in &parts {
                ls.append(part);
            }
        }
        let cons_depth = orth.end..ls.n_rows();

        let s4 = cfg.w4.sqrt();
        let chunks: Vec<(LeastSquares, Vec<usize>)> = if s4 > 0.0 {
            corrs
                .par_chunks(8192)
                .map(|chunk| {
                    let mut part = LeastSquares::new(n);
                    let mut owners = Vec::new();
                    for c in chunk {
                        let (it, jt) = c.target_pixel;
                        if *self.silhouettes[c.target_view].get(it, jt) {
                            continue;
                        }
                        if self.tangent_rows(&mut part, c.target_view, it, jt, &c.normal, s4) {
                            owners.extend([c.target_unknown, c.target_unknown]);
                        }
                    }
                    (part, owners)
                })
                .collect()
        } else {
            Vec::new()
        };
        let mut tangent_owners = Vec::new();
        for (part, owners) in &chunks {
            ls.append(part);
            tangent_owners.extend_from_slice(owners);
        }
        let cons_tangent = cons_depth.end..ls.n_rows();
        FusionSystem {
            ls,
            layout: SystemLayout {
                net,
                orth,
                cons_depth,
                cons_tangent,
            },
            orth_owners,
            tangent_owners,
        }
    }

    /// Evaluates the energy term by term straight from the definitions
    /// (reprojecting through the cameras), independent of [`Self::assemble`].
    pub fn energy(&self, depths: &[f64], corrs: &[Correspondence]) -> EnergyBreakdown {
        let cfg = &self.config;
        let m = self.maps;
        let net: Vec<f64> = depths.iter().zip(&self.predicted).map(|(d, p)| (d - p) * (d - p)).collect();
        let e_net = cfg.w1 * det_sum(&net);

        let orth: Vec<f64> = self
            .unknowns
            .pixels
            .par_iter()
            .enumerate()
            .map(|(k, &(v, i, j))| {
                if *self.silhouettes[v].get(i, j) {
                    return 0.0;
                }
                match self.tangents_at(v, i, j, depths) {
                    Some((tx, ty)) => tx.dot(&self.normals[k]).powi(2) + ty.dot(&self.normals[k]).powi(2),
                    None => 0.0,
                }
            })
            .collect();
        let e_orth = cfg.w2 * det_sum(&orth);

        let cons: Vec<(f64, f64)> = corrs
            .par_iter()
            .map(|c| {
                let cam = &m.rig.cameras[c.source_view];
                let cam_t = &m.rig.cameras[c.target_view];
                let (i, j) = c.source_pixel;
                let q = cam.unproject(i as f64, j as f64, depths[c.source_unknown]);
                let z = cam_t.project(&q).2;
                let (it, jt) = c.target_pixel;
                let silhouette = *self.silhouettes[c.target_view].get(it, jt);
                let t = self.tangents_at(c.target_view, it, jt, depths);
                let target = match cfg.target_sampling {
                    TargetSampling::Nearest => Some(depths[c.target_unknown]),
                    TargetSampling::Bilinear => self.sample(c, depths).map(|s| s.value),
                };
                let dd = target.map_or(0.0, |d: f64| (d - z).powi(2));
                let tan = match (silhouette, t) {
                    (false, Some((tx, ty))) => {
                        let n_t = cam_t.rotate_to_camera(&cam.pose.apply_vector(&self.normals[c.source_unknown]));
                        tx.dot(&n_t).powi(2) + ty.dot(&n_t).powi(2)
                    }
                    _ => 0.0,
                };
                (dd, tan)
            })
            .collect();
        let depth_terms: Vec<f64> = cons.iter().map(|c| c.0).collect();
        let tan_terms: Vec<f64> = cons.iter().map(|c| c.1).collect();
        let e_cons = cfg.w3 * det_sum(&depth_terms) + cfg.w4 * det_sum(&tan_terms);
        EnergyBreakdown {
            e_net,
            e_orth,
            e_cons,
            total: e_net + e_orth + e_cons,
        }
    }

    /// Copies `depths` into a map set (clamped to `[-1, 1]`) and builds the
    /// oriented cloud from the same depths.
    pub fn export(&self, depths: &[f64]) -> (MapSet, OrientedPointCloud) {
        let mut out = self.maps.clone();
        let mut cloud = OrientedPointCloud::default();
        for (k, &(v, i, j)) in self.unknowns.pixels.iter().enumerate() {
            let d = depths[k].clamp(-1.0, 1.0);
            out.views[v].depth.set(i, j, d as f32);
            let cam = &self.maps.rig.cameras[v];
            cloud.push(
                cam.unproject(i as f64, j as f64, d),
                cam.pose.apply_vector(&self.normals[k]),
            );
        }
        (out, cloud)
    }
}

/// Correspondences of a map set at its stored depths.
pub fn build_correspondences(m: &MapSet, config: &FusionConfig) -> Result<Vec<Correspondence>> {
    let p = FusionProblem::new(m, config)?;
    Ok(p.correspondences(&p.predicted.clone()))
}

/// Energy of `depths` (one per foreground pixel, view-major, row-major).
pub fn energy(m: &MapSet, depths: &[f64], corrs: &[Correspondence], config: &FusionConfig) -> Result<EnergyBreakdown> {
    let p = FusionProblem::new(m, config)?;
    if depths.len() != p.n_unknowns() {
        return Err(Error::InvalidArgument(format!(
            "{} depths for {} foreground pixels",
            depths.len(),
            p.n_unknowns()
        )));
    }
    Ok(p.energy(depths, corrs))
}

/// Culls foreground pixels whose point lands on background in more than
/// half of the other views where it projects inside the image. Single pass
/// against the input masks.
pub fn remove_outliers(m: &MapSet) -> (MapSet, usize) {
    let cams = &m.rig.cameras;
    let doomed: Vec<Vec<(usize, usize)>> = (0..m.views.len())
        .into_par_iter()
        .map(|v| {
            let maps = &m.views[v];
            let cam = &cams[v];
            let (w, h) = (maps.mask.width(), maps.mask.height());
            let mut out = Vec::new();
            for j in 0..h {
                for i in 0..w {
                    if !maps.mask.is_fg(i, j) {
                        continue;
                    }
                    let q = cam.unproject(i as f64, j as f64, *maps.depth.get(i, j) as f64);
                    let (mut inside, mut background) = (0usize, 0usize);
                    for (vt, cam_t) in cams.iter().enumerate() {
                        if vt == v {
                            continue;
                        }
                        let (px, py, _) = cam_t.project(&q);
                        if let Some((a, b)) = cam_t.pixel_of(px, py) {
                            inside += 1;
                            if !m.views[vt].mask.is_fg(a, b) {
                                background += 1;
                            }
                        }
                    }
                    if 2 * background > inside {
                        out.push((i, j));
                    }
                }
            }
            out
        })
        .collect();
    let mut out = m.clone();
    let mut removed = 0;
    for (v, pixels) in doomed.iter().enumerate() {
        for &(i, j) in pixels {
            out.views[v].clear_pixel(i, j);
            removed += 1;
        }
    }
    (out, removed)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub e_net: f64,
    pub e_orth: f64,
    pub e_cons: f64,
    pub total: f64,
    pub correspondences: usize,
    pub mean_correspondences: f64,
    pub outliers_removed: usize,
    pub solver_iterations: usize,
    pub solver_residual: f64,
    pub solver_converged: bool,
    /// Frozen-correspondence energy before and after the solve.
    pub frozen_before: f64,
    pub frozen_after: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub unknowns: usize,
    pub iterations: Vec<IterationRecord>,
    /// Set when any linear solve hit its iteration cap.
    pub solver_warning: bool,
}

impl FusionReport {
    /// `|E_b − E_a| / max(E_a, tiny)` between 1-based iterations `a` and `b`.
    pub fn relative_change(&self, a: usize, b: usize) -> Option<f64> {
        let ea = self.iterations.get(a.checked_sub(1)?)?.total;
        let eb = self.iterations.get(b.checked_sub(1)?)?.total;
        Some((eb - ea).abs() / ea.abs().max(f64::MIN_POSITIVE))
    }
}

#[derive(Clone, Debug)]
pub struct FusionOutput {
    pub maps: MapSet,
    pub cloud: OrientedPointCloud,
    pub report: FusionReport,
}

/// Runs the outer loop on a map set that is already aligned and culled.
pub fn solve_fusion(m: &MapSet, config: &FusionConfig) -> Result<FusionOutput> {
    solve_with_removed(m, config, 0)
}

/// Outlier removal followed by [`solve_fusion`].
pub fn fuse(m: &MapSet, config: &FusionConfig) -> Result<FusionOutput> {
    let (culled, removed) = remove_outliers(m);
    solve_with_removed(&culled, config, removed)
}

fn solve_with_removed(m: &MapSet, config: &FusionConfig, removed: usize) -> Result<FusionOutput> {
    let problem = FusionProblem::new(m, config)?;
    let n = problem.n_unknowns();
    let mut depths = problem.predicted.clone();
    let mut report = FusionReport {
        unknowns: n,
        ..Default::default()
    };
    for it in 1..=config.outer_iterations {
        let corrs = problem.correspondences(&depths);
        let system = problem.assemble(&corrs, &depths);
        let before = system.ls.objective(&depths);
        let outcome = solve_normal_equations(
            &system.ls,
            &mut depths,
            config.solver_tolerance,
            config.solver_max_iterations,
        )?;
        let after = system.ls.objective(&depths);
        let parts = problem.energy(&depths, &corrs);
        if !parts.total.is_finite() {
            return Err(Error::Numerical(format!("non-finite energy at iteration {it}")));
        }
        report.solver_warning |= !outcome.converged;
        report.iterations.push(IterationRecord {
            iteration: it,
            e_net: parts.e_net,
            e_orth: parts.e_orth,
            e_cons: parts.e_cons,
            total: parts.total,
            correspondences: corrs.len(),
            mean_correspondences: if n > 0 { corrs.len() as f64 / n as f64 } else { 0.0 },
            outliers_removed: if it == 1 { removed } else { 0 },
            solver_iterations: outcome.iterations,
            solver_residual: outcome.relative_residual,
            solver_converged: outcome.converged,
            frozen_before: before,
            frozen_after: after,
        });
        if it > 1 {
            let rel = report.relative_change(it - 1, it).unwrap_or(0.0);
            if rel < config.early_exit {
                break;
            }
        }
    }
    let (maps, cloud) = problem.export(&depths);
    Ok(FusionOutput { maps, cloud, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Mat3, RigidTransform};
    use crate::maps::ViewMaps;
    use crate::views::{OrthographicCamera, ViewRig};

    fn one_view(w: usize, h: usize, depth: impl Fn(usize, usize) -> f64) -> MapSet {
        let cam = OrthographicCamera::new(RigidTransform::identity(), 2.0 / w as f64, w, h).unwrap();
        let mut maps = ViewMaps::background(w, h);
        for j in 0..h {
            for i in 0..w {
                maps.mask.set(i, j, true);
                maps.depth.set(i, j, depth(i, j) as f32);
            }
        }
        MapSet { rig: ViewRig { cameras: vec![cam], up_axis: Vec3::y() }, views: vec![maps] }
    }

    #[test]
    fn constant_plane_tangents() {
        let m = one_view(8, 8, |_, _| 0.25);
        let k = m.rig.kappa();
        let (tx, ty) = tangents(&m.views[0].depth, &m.views[0].mask, k, 3, 4).unwrap();
        assert_eq!(tx, Vec3::new(k, 0.0, 0.0));
        assert_eq!(ty, Vec3::new(0.0, k, 0.0));
    }

    #[test]
    fn ramp_tangents_and_one_sided_edges() {
        let a = 0.5;
        // Dyadic width keeps κ and the ramp exact in f32.
        let m = one_view(16, 16, |i, _| {
            let k = 2.0 / 16.0;
            a * k * (i as f64 + 0.5 - 8.0)
        });
        let k = m.rig.kappa();
        for i in [0usize, 5, 15] {
            let (tx, _) = tangents(&m.views[0].depth, &m.views[0].mask, k, i, 7).unwrap();
            assert!((tx.z - a * k).abs() < 1e-7, "i={i} {}", tx.z);
            assert!((tx.normalize() - Vec3::new(1.0, 0.0, a).normalize()).norm() < 1e-6);
        }
    }

    #[test]
    fn isolated_pixel_has_no_tangents() {
        let mut m = one_view(4, 4, |_, _| 0.0);
        for j in 0..4 {
            for i in 0..4 {
                if (i, j) != (1, 1) {
                    m.views[0].clear_pixel(i, j);
                }
            }
        }
        assert!(tangents(&m.views[0].depth, &m.views[0].mask, 0.5, 1, 1).is_none());
        assert!(derivative_stencil(&m.views[0].mask, 1, 1, Axis::X).is_none());
    }

    #[test]
    fn single_view_has_no_correspondences() {
        let m = one_view(8, 8, |_, _| 0.0);
        assert!(build_correspondences(&m, &FusionConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn net_only_returns_input() {
        let m = one_view(12, 10, |i, j| 0.01 * i as f64 - 0.02 * j as f64);
        let cfg = FusionConfig { w2: 0.0, w3: 0.0, w4: 0.0, ..Default::default() };
        let out = solve_fusion(&m, &cfg).unwrap();
        assert!(out.maps.bitwise_eq(&m));
        assert_eq!(out.report.iterations[0].total, 0.0);
    }

    #[test]
    fn empty_foreground_has_zero_energy() {
        let m = MapSet::background(ViewRig::icosahedron(8, 8).unwrap());
        let e = energy(&m, &[], &[], &FusionConfig::default()).unwrap();
        assert_eq!(e, EnergyBreakdown::default());
        let out = solve_fusion(&m, &FusionConfig::default()).unwrap();
        assert!(out.cloud.is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(FusionConfig { w3: -1.0, ..Default::default() }.validate().is_err());
        assert!(FusionConfig { outer_iterations: 0, ..Default::default() }.validate().is_err());
        assert!(FusionConfig { occlusion_threshold: Some(0.0), ..Default::default() }.validate().is_err());
    }

    /// Two 5×5 views of the plane `z = 0.3 + 0.2 x`, fully foreground, with
    /// noisy depths and random normals.
    pub(crate) fn toy_problem(seed: u64) -> (MapSet, Vec<f64>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let kappa = 0.1;
        let poses = [
            RigidTransform::identity(),
            RigidTransform::from_axis_angle(Vec3::y(), 20f64.to_radians(), Vec3::zeros()),
        ];
        let cameras: Vec<OrthographicCamera> =
            poses.iter().map(|p| OrthographicCamera::new(*p, kappa, 5, 5).unwrap()).collect();
        let mut views = Vec::new();
        let mut noisy = Vec::new();
        for cam in &cameras {
            let mut maps = ViewMaps::background(5, 5);
            for j in 0..5 {
                for i in 0..5 {
                    let q0 = cam.unproject(i as f64, j as f64, 0.0);
                    let dir = cam.z_axis();
                    let d = -(q0.z - 0.2 * q0.x - 0.3) / (dir.z - 0.2 * dir.x);
                    let n = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 1.0).normalize();
                    maps.mask.set(i, j, true);
                    maps.depth.set(i, j, d as f32);
                    maps.normal.set(i, j, [n.x as f32, n.y as f32, n.z as f32]);
                    noisy.push(d + rng.random_range(-0.02..0.02));
                }
            }
            views.push(maps);
        }
        (MapSet { rig: ViewRig { cameras, up_axis: Vec3::y() }, views }, noisy)
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for sampling in [TargetSampling::Bilinear, TargetSampling::Nearest] {
            let (m, d) = toy_problem(3);
            let cfg = FusionConfig { target_sampling: sampling, ..Default::default() };
            let p = FusionProblem::new(&m, &cfg).unwrap();
            assert!(p.n_unknowns() <= 50);
            let corrs = p.correspondences(&d);
            assert!(!corrs.is_empty());
            let sys = p.assemble(&corrs, &d);
            assert!((sys.ls.objective(&d) - p.energy(&d, &corrs).total).abs() < 1e-12);
            let g = sys.ls.gradient(&d);
            let h = 1e-5;
            for k in 0..d.len() {
                let mut a = d.clone();
                let mut b = d.clone();
                a[k] += h;
                b[k] -= h;
                let fd = (p.energy(&a, &corrs).total - p.energy(&b, &corrs).total) / (2.0 * h);
                let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-8);
                assert!(rel < 1e-4, "{sampling:?} unknown {k}: fd {fd} analytic {}", g[k]);
            }
        }
    }

    #[test]
    fn assembly_is_affine_and_repeatable() {
        let (m, d) = toy_problem(5);
        let p = FusionProblem::new(&m, &FusionConfig::default()).unwrap();
        let corrs = p.correspondences(&d);
        let a = p.assemble(&corrs, &d);
        assert_eq!(a, p.assemble(&corrs, &d));
        // Affine: residual(x + y) − residual(x) is linear in y.
        let x: Vec<f64> = d.iter().map(|v| v + 0.01).collect();
        let r0 = a.ls.residuals(&d);
        let r1 = a.ls.residuals(&x);
        let r2: Vec<f64> = a.ls.residuals(&d.iter().map(|v| v + 0.02).collect::<Vec<_>>());
        for k in 0..r0.len() {
            assert!(((r2[k] - r0[k]) - 2.0 * (r1[k] - r0[k])).abs() < 1e-12);
        }
        for &k in a.orth_owners.iter().chain(&a.tangent_owners) {
            assert!(!p.is_silhouette(k));
        }
    }

    #[test]
    fn solve_reaches_stationary_point_of_frozen_system() {
        let (m, _) = toy_problem(7);
        let cfg = FusionConfig::default();
        let p = FusionProblem::new(&m, &cfg).unwrap();
        let mut d = p.predicted_depths().to_vec();
        let corrs = p.correspondences(&d);
        let sys = p.assemble(&corrs, &d);
        let before = sys.ls.objective(&d);
        solve_normal_equations(&sys.ls, &mut d, 1e-10, 500).unwrap();
        assert!(sys.ls.objective(&d) <= before);
        let mut jtb = vec![0.0; d.len()];
        sys.ls.jacobian.transpose().mul_vec(&sys.ls.rhs, &mut jtb);
        let scale = 2.0 * jtb.iter().map(|v| v * v).sum::<f64>().sqrt();
        let g = sys.ls.gradient(&d);
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-9 * scale);
    }

    #[test]
    fn tilted_plane_tangents_are_orthogonal_to_rendered_normals() {
        use crate::mesh::TriangleMesh;
        use crate::render::{render_mapset, RenderOptions};
        let verts = vec![
            Vec3::new(-0.55, -0.55, -0.55),
            Vec3::new(0.55, -0.55, 0.55),
            Vec3::new(0.55, 0.55, 0.55),
            Vec3::new(-0.55, 0.55, -0.55),
        ];
        let mesh = TriangleMesh::new(verts, vec![[0, 1, 2], [0, 2, 3]]).unwrap();
        let cam = OrthographicCamera::new(RigidTransform::identity(), 2.0 / 64.0, 64, 64).unwrap();
        let rig = ViewRig { cameras: vec![cam], up_axis: Vec3::y() };
        let m = render_mapset(&mesh, &rig, RenderOptions::default()).unwrap();
        let v = &m.views[0];
        let mut checked = 0;
        for j in 20..44 {
            for i in 20..44 {
                let (tx, ty) = tangents(&v.depth, &v.mask, rig.kappa(), i, j).unwrap();
                let n = normal_vec(v.normal.get(i, j));
                assert!(tx.normalize().dot(&n).abs() < 1e-3);
                assert!(ty.normalize().dot(&n).abs() < 1e-3);
                checked += 1;
            }
        }
        assert_eq!(checked, 24 * 24);
    }

    fn two_cameras(second: RigidTransform) -> ViewRig {
        let cams = [RigidTransform::identity(), second]
            .iter()
            .map(|p| OrthographicCamera::new(*p, 0.25, 8, 8).unwrap())
            .collect();
        ViewRig { cameras: cams, up_axis: Vec3::y() }
    }

    #[test]
    fn occluded_point_gets_no_correspondence() {
        let rig = two_cameras(RigidTransform::identity());
        let mut m = MapSet::background(rig);
        for v in 0..2 {
            m.views[v].mask.set(3, 3, true);
            m.views[v].normal.set(3, 3, [0.0, 0.0, 1.0]);
        }
        m.views[0].depth.set(3, 3, 0.5);
        m.views[1].depth.set(3, 3, 0.5);
        let cfg = FusionConfig::default();
        assert_eq!(build_correspondences(&m, &cfg).unwrap().len(), 2);
        // A nearer surface in view 1 hides the point.
        m.views[1].depth.set(3, 3, -0.5);
        assert!(build_correspondences(&m, &cfg).unwrap().is_empty());
    }

    #[test]
    fn outlier_removal_fixtures() {
        use crate::primitives::icosphere;
        use crate::render::{render_mapset, RenderOptions};
        let rig = ViewRig::icosahedron(64, 64).unwrap();
        let m = render_mapset(&icosphere(0.8, 3), &rig, RenderOptions::default()).unwrap();
        let (clean, removed) = remove_outliers(&m);
        assert_eq!(removed, 0);
        assert!(clean.bitwise_eq(&m));

        let mut dirty = m.clone();
        dirty.views[0].mask.set(2, 2, true);
        dirty.views[0].depth.set(2, 2, 0.0);
        dirty.views[0].normal.set(2, 2, [0.0, 0.0, 1.0]);
        let (culled, removed) = remove_outliers(&dirty);
        assert_eq!(removed, 1);
        assert!(!culled.views[0].mask.is_fg(2, 2));

        // Nothing projects into a camera far off to the side: no evidence, kept.
        let far = two_cameras(RigidTransform::new(Mat3::identity(), Vec3::new(10.0, 0.0, 0.0)).unwrap());
        let mut lone = MapSet::background(far);
        lone.views[0].mask.set(4, 4, true);
        assert_eq!(remove_outliers(&lone).1, 0);
    }

    #[test]
    fn outputs_do_not_depend_on_thread_count() {
        use crate::primitives::icosphere;
        use crate::render::{perturb_mapset, render_mapset, PerturbationSpec, RenderOptions};
        let rig = ViewRig::icosahedron(48, 48).unwrap();
        let m = render_mapset(&icosphere(0.8, 3), &rig, RenderOptions::default()).unwrap();
        let spec = PerturbationSpec { view_bias: 0.02, depth_noise: 0.005, seed: 4, ..Default::default() };
        let noisy = perturb_mapset(&m, &spec).unwrap();
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| fuse(&noisy, &FusionConfig::default()).unwrap())
        };
        let (a, b) = (run(1), run(4));
        assert!(a.maps.bitwise_eq(&b.maps));
        assert_eq!(a.report, b.report);
    }
}

//! Per-view oriented point sets generated from the foreground pixels.

use rayon::prelude::*;

use crate::geometry::Vec3;
use crate::maps::{normal_vec, ForegroundMask, Grid, MapSet};
use crate::pointcloud::OrientedPointCloud;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewPoint {
    pub position: Vec3,
    pub normal: Vec3,
    pub view: usize,
    pub pixel: (usize, usize),
    pub silhouette: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointSet {
    pub points: Vec<ViewPoint>,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.points.iter().map(|p| p.position).collect()
    }

    pub fn to_cloud(&self) -> OrientedPointCloud {
        OrientedPointCloud::new(
            self.positions(),
            self.points.iter().map(|p| p.normal).collect(),
        )
    }
}

/// Foreground pixels with at least one background pixel among their eight
/// neighbors; the image border counts as background.
pub fn silhouette_pixels(mask: &ForegroundMask) -> Grid<bool> {
    let (w, h) = (mask.width(), mask.height());
    let mut out = Grid::filled(w, h, false);
    for j in 0..h {
        for i in 0..w {
            if !mask.is_fg(i, j) {
                continue;
            }
            let mut sil = false;
            'nb: for dj in -1i64..=1 {
                for di in -1i64..=1 {
                    let (x, y) = (i as i64 + di, j as i64 + dj);
                    if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 || !mask.is_fg(x as usize, y as usize) {
                        sil = true;
                        break 'nb;
                    }
                }
            }
            out.set(i, j, sil);
        }
    }
    out
}

/// One point per foreground pixel, in object space, with object-space normals.
pub fn generate_points(m: &MapSet) -> Vec<PointSet> {
    m.views
        .par_iter()
        .zip(m.rig.cameras.par_iter())
        .enumerate()
        .map(|(v, (maps, cam))| {
            let sil = silhouette_pixels(&maps.mask);
            let (w, h) = (maps.mask.width(), maps.mask.height());
            let mut points = Vec::with_capacity(maps.mask.count());
            for j in 0..h {
                for i in 0..w {
                    if !maps.mask.is_fg(i, j) {
                        continue;
                    }
                    let d = *maps.depth.get(i, j) as f64;
                    points.push(ViewPoint {
                        position: cam.unproject(i as f64, j as f64, d),
                        normal: cam.pose.apply_vector(&normal_vec(maps.normal.get(i, j))).normalize(),
                        view: v,
                        pixel: (i, j),
                        silhouette: *sil.get(i, j),
                    });
                }
            }
            PointSet { points }
        })
        .collect()
}

/// Plain concatenation of all view sets.
pub fn concatenate(sets: &[PointSet]) -> OrientedPointCloud {
    let mut cloud = OrientedPointCloud::default();
    for s in sets {
        for p in &s.points {
            cloud.push(p.position, p.normal);
        }
    }
    cloud
}

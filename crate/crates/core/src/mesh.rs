//! Indexed triangle meshes with a bounding-volume hierarchy for
//! nearest-point and ray queries, plus area-uniform surface sampling.
//!
//! Ties between equidistant triangles are broken toward the lowest triangle
//! index so that accelerated queries agree exactly with brute-force scans.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{is_finite, RigidTransform, Vec3};
use crate::pointcloud::OrientedPointCloud;

const MIN_TRIANGLE_AREA: f64 = 1e-12;
const LEAF_SIZE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn empty() -> Self {
        Aabb {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn merge(&mut self, other: &Aabb) {
        self.min = self.min.inf(&other.min);
        self.max = self.max.sup(&other.max);
    }

    fn distance_squared(&self, p: &Vec3) -> f64 {
        let mut d2 = 0.0;
        for k in 0..3 {
            let v = p[k];
            if v < self.min[k] {
                d2 += (self.min[k] - v) * (self.min[k] - v);
            } else if v > self.max[k] {
                d2 += (v - self.max[k]) * (v - self.max[k]);
            }
        }
        d2
    }

    /// Slab test; returns the entry parameter when the ray overlaps `[0, t_max]`.
    fn ray_entry(&self, origin: &Vec3, inv_dir: &Vec3, t_max: f64) -> Option<f64> {
        let mut t0: f64 = 0.0;
        let mut t1 = t_max;
        for k in 0..3 {
            let mut near = (self.min[k] - origin[k]) * inv_dir[k];
            let mut far = (self.max[k] - origin[k]) * inv_dir[k];
            if near > far {
                std::mem::swap(&mut near, &mut far);
            }
            // NaN arises for a zero direction component with the origin on a slab plane.
            if near.is_nan() || far.is_nan() {
                if origin[k] < self.min[k] || origin[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            // Widen slightly so rays grazing a flat box are not culled.
            far *= 1.0 + 4.0 * f64::EPSILON;
            t0 = t0.max(near);
            t1 = t1.min(far);
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }
}

#[derive(Clone, Debug)]
enum Node {
    Leaf { bounds: Aabb, start: u32, count: u32 },
    Inner { bounds: Aabb, left: u32, right: u32 },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

/// Median-split BVH over triangle indices.
#[derive(Clone, Debug)]
struct Bvh {
    nodes: Vec<Node>,
    order: Vec<u32>,
}

impl Bvh {
    fn build(vertices: &[Vec3], triangles: &[[u32; 3]]) -> Self {
        let mut order: Vec<u32> = (0..triangles.len() as u32).collect();
        let centroids: Vec<Vec3> = triangles
            .iter()
            .map(|t| (vertices[t[0] as usize] + vertices[t[1] as usize] + vertices[t[2] as usize]) / 3.0)
            .collect();
        let tri_bounds: Vec<Aabb> = triangles
            .iter()
            .map(|t| {
                let mut b = Aabb::empty();
                for &i in t {
                    b.grow(&vertices[i as usize]);
                }
                b
            })
            .collect();
        let mut nodes = Vec::with_capacity(2 * triangles.len() / LEAF_SIZE + 1);
        if !triangles.is_empty() {
            Self::build_node(&mut nodes, &mut order, 0, &centroids, &tri_bounds);
        }
        Bvh { nodes, order }
    }

    fn build_node(
        nodes: &mut Vec<Node>,
        order: &mut [u32],
        offset: usize,
        centroids: &[Vec3],
        tri_bounds: &[Aabb],
    ) -> u32 {
        let mut bounds = Aabb::empty();
        let mut cbounds = Aabb::empty();
        for &t in order.iter() {
            bounds.merge(&tri_bounds[t as usize]);
            cbounds.grow(&centroids[t as usize]);
        }
        let index = nodes.len() as u32;
        if order.len() <= LEAF_SIZE {
            nodes.push(Node::Leaf {
                bounds,
                start: offset as u32,
                count: order.len() as u32,
            });
            return index;
        }
        let extent = cbounds.max - cbounds.min;
        let axis = if extent.x >= extent.y && extent.x >= extent.z {
            0
        } else if extent.y >= extent.z {
            1
        } else {
            2
        };
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |&a, &b| {
            centroids[a as usize][axis]
                .total_cmp(&centroids[b as usize][axis])
                .then(a.cmp(&b))
        });
        nodes.push(Node::Leaf {
            bounds,
            start: 0,
            count: 0,
        });
        let (lo, hi) = order.split_at_mut(mid);
        let left = Self::build_node(nodes, lo, offset, centroids, tri_bounds);
        let right = Self::build_node(nodes, hi, offset + mid, centroids, tri_bounds);
        nodes[index as usize] = Node::Inner {
            bounds,
            left,
            right,
        };
        index
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfacePoint {
    pub point: Vec3,
    pub distance: f64,
    pub triangle: usize,
    pub normal: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayHit {
    pub t: f64,
    pub point: Vec3,
    pub normal: Vec3,
    pub triangle: usize,
}

/// Immutable indexed triangle mesh with a spatial index.
#[derive(Clone, Debug)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[u32; 3]>,
    vertex_normals: Option<Vec<Vec3>>,
    face_normals: Vec<Vec3>,
    areas: Vec<f64>,
    bvh: Bvh,
}

impl TriangleMesh {
    /// Validates indices and rejects degenerate (area < 1e-12) triangles.
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        Self::with_normals(vertices, triangles, None)
    }

    pub fn with_normals(
        vertices: Vec<Vec3>,
        triangles: Vec<[u32; 3]>,
        vertex_normals: Option<Vec<Vec3>>,
    ) -> Result<Self> {
        if let Some((i, _)) = vertices.iter().enumerate().find(|(_, v)| !is_finite(v)) {
            return Err(Error::InvalidMesh(format!("vertex {i} is not finite")));
        }
        let mut face_normals = Vec::with_capacity(triangles.len());
        let mut areas = Vec::with_capacity(triangles.len());
        for (ti, t) in triangles.iter().enumerate() {
            if let Some(&bad) = t.iter().find(|&&i| i as usize >= vertices.len()) {
                return Err(Error::InvalidMesh(format!(
                    "triangle {ti} references vertex {bad} but the mesh has {} vertices",
                    vertices.len()
                )));
            }
            let (a, b, c) = (
                vertices[t[0] as usize],
                vertices[t[1] as usize],
                vertices[t[2] as usize],
            );
            let cross = (b - a).cross(&(c - a));
            let area = 0.5 * cross.norm();
            if !(area >= MIN_TRIANGLE_AREA) {
                return Err(Error::InvalidMesh(format!(
                    "triangle {ti} is degenerate (area {area:e})"
                )));
            }
            face_normals.push(cross / (2.0 * area));
            areas.push(area);
        }
        let vertex_normals = match vertex_normals {
            Some(n) if n.len() != vertices.len() => {
                return Err(Error::InvalidMesh(format!(
                    "{} vertex normals for {} vertices",
                    n.len(),
                    vertices.len()
                )))
            }
            Some(n) => Some(
                n.into_iter()
                    .map(|v| {
                        let len = v.norm();
                        if len > 0.0 && len.is_finite() {
                            v / len
                        } else {
                            v
                        }
                    })
                    .collect(),
            ),
            None => None,
        };
        let bvh = Bvh::build(&vertices, &triangles);
        Ok(TriangleMesh {
            vertices,
            triangles,
            vertex_normals,
            face_normals,
            areas,
            bvh,
        })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn vertex_normals(&self) -> Option<&[Vec3]> {
        self.vertex_normals.as_deref()
    }

    pub fn face_normals(&self) -> &[Vec3] {
        &self.face_normals
    }

    pub fn face_normal(&self, triangle: usize) -> Vec3 {
        self.face_normals[triangle]
    }

    pub fn area(&self, triangle: usize) -> f64 {
        self.areas[triangle]
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn bounds(&self) -> Aabb {
        self.bvh
            .nodes
            .first()
            .map(|n| *n.bounds())
            .unwrap_or_else(Aabb::empty)
    }

    /// Area-weighted per-vertex normals from the face normals.
    pub fn computed_vertex_normals(&self) -> Vec<Vec3> {
        let mut acc = vec![Vec3::zeros(); self.vertices.len()];
        for (ti, t) in self.triangles.iter().enumerate() {
            let n = self.face_normals[ti] * self.areas[ti];
            for &i in t {
                acc[i as usize] += n;
            }
        }
        acc.into_iter()
            .map(|n| {
                let l = n.norm();
                if l > 0.0 {
                    n / l
                } else {
                    Vec3::z()
                }
            })
            .collect()
    }

    /// Same connectivity with smooth normals attached.
    pub fn with_smooth_normals(&self) -> TriangleMesh {
        let mut m = self.clone();
        m.vertex_normals = Some(self.computed_vertex_normals());
        m
    }

    /// Same connectivity with vertices replaced; rebuilds the index.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<TriangleMesh> {
        TriangleMesh::with_normals(vertices, self.triangles.clone(), None)
    }

    pub fn transformed(&self, t: &RigidTransform) -> Result<TriangleMesh> {
        let vertices = self.vertices.iter().map(|v| t.apply(v)).collect();
        let normals = self
            .vertex_normals
            .as_ref()
            .map(|ns| ns.iter().map(|n| t.apply_vector(n)).collect());
        TriangleMesh::with_normals(vertices, self.triangles.clone(), normals)
    }

    fn corners(&self, triangle: usize) -> (Vec3, Vec3, Vec3) {
        let t = self.triangles[triangle];
        (
            self.vertices[t[0] as usize],
            self.vertices[t[1] as usize],
            self.vertices[t[2] as usize],
        )
    }

    fn shading_normal(&self, triangle: usize, bary: (f64, f64, f64)) -> Vec3 {
        match &self.vertex_normals {
            Some(ns) => {
                let t = self.triangles[triangle];
                let n = ns[t[0] as usize] * bary.0 + ns[t[1] as usize] * bary.1 + ns[t[2] as usize] * bary.2;
                let l = n.norm();
                if l > 1e-12 {
                    n / l
                } else {
                    self.face_normals[triangle]
                }
            }
            None => self.face_normals[triangle],
        }
    }

    fn closest_on(&self, triangle: usize, q: &Vec3) -> (Vec3, f64, (f64, f64, f64)) {
        let (a, b, c) = self.corners(triangle);
        let (p, bary) = closest_point_on_triangle(q, &a, &b, &c);
        (p, (p - q).norm_squared(), bary)
    }

    fn surface_point(&self, triangle: usize, q: &Vec3) -> SurfacePoint {
        let (point, d2, bary) = self.closest_on(triangle, q);
        SurfacePoint {
            point,
            distance: d2.sqrt(),
            triangle,
            normal: self.shading_normal(triangle, bary),
        }
    }

    /// Exact closest point on the surface via the BVH.
    pub fn nearest_surface_point(&self, query: &Vec3) -> Result<SurfacePoint> {
        if self.is_empty() {
            return Err(Error::EmptyMesh);
        }
        let mut best = (f64::INFINITY, usize::MAX);
        let mut stack: Vec<u32> = Vec::with_capacity(64);
        stack.push(0);
        while let Some(ni) = stack.pop() {
            let node = &self.bvh.nodes[ni as usize];
            if node.bounds().distance_squared(query) > best.0 {
                continue;
            }
            match node {
                Node::Leaf { start, count, .. } => {
                    for &t in &self.bvh.order[*start as usize..(*start + *count) as usize] {
                        let t = t as usize;
                        let (_, d2, _) = self.closest_on(t, query);
                        if d2 < best.0 || (d2 == best.0 && t < best.1) {
                            best = (d2, t);
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    let dl = self.bvh.nodes[*left as usize].bounds().distance_squared(query);
                    let dr = self.bvh.nodes[*right as usize].bounds().distance_squared(query);
                    // Nearer child popped first.
                    if dl <= dr {
                        stack.push(*right);
                        stack.push(*left);
                    } else {
                        stack.push(*left);
                        stack.push(*right);
                    }
                }
            }
        }
        Ok(self.surface_point(best.1, query))
    }

    /// O(n) scan with the same tie-breaking as [`Self::nearest_surface_point`].
    pub fn nearest_surface_point_brute_force(&self, query: &Vec3) -> Result<SurfacePoint> {
        if self.is_empty() {
            return Err(Error::EmptyMesh);
        }
        let mut best = (f64::INFINITY, usize::MAX);
        for t in 0..self.triangles.len() {
            let (_, d2, _) = self.closest_on(t, query);
            if d2 < best.0 || (d2 == best.0 && t < best.1) {
                best = (d2, t);
            }
        }
        Ok(self.surface_point(best.1, query))
    }

    /// Nearest intersection with `t >= 0`. `direction` must be unit length.
    pub fn ray_intersect(&self, origin: &Vec3, direction: &Vec3) -> Option<RayHit> {
        if self.is_empty() {
            return None;
        }
        let inv = Vec3::new(1.0 / direction.x, 1.0 / direction.y, 1.0 / direction.z);
        let prep = RayPrep::new(origin, direction);
        let mut best: Option<(f64, usize, (f64, f64, f64))> = None;
        let mut stack: Vec<u32> = vec![0];
        while let Some(ni) = stack.pop() {
            let node = &self.bvh.nodes[ni as usize];
            let t_max = best.map_or(f64::INFINITY, |b| b.0);
            if node.bounds().ray_entry(origin, &inv, t_max).is_none() {
                continue;
            }
            match node {
                Node::Leaf { start, count, .. } => {
                    for &t in &self.bvh.order[*start as usize..(*start + *count) as usize] {
                        let t = t as usize;
                        let (a, b, c) = self.corners(t);
                        if let Some((th, bary)) = prep.intersect(&a, &b, &c) {
                            let better = match best {
                                None => true,
                                Some((bt, bi, _)) => th < bt || (th == bt && t < bi),
                            };
                            if better {
                                best = Some((th, t, bary));
                            }
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    stack.push(*right);
                    stack.push(*left);
                }
            }
        }
        best.map(|(t, tri, bary)| {
            let (a, b, c) = self.corners(tri);
            RayHit {
                t,
                point: a * bary.0 + b * bary.1 + c * bary.2,
                normal: self.shading_normal(tri, bary),
                triangle: tri,
            }
        })
    }

    /// Every intersection with `t >= 0`, sorted by `(t, triangle)`.
    pub fn ray_intersect_all(&self, origin: &Vec3, direction: &Vec3) -> Vec<(f64, usize)> {
        let mut hits = Vec::new();
        if self.is_empty() {
            return hits;
        }
        let inv = Vec3::new(1.0 / direction.x, 1.0 / direction.y, 1.0 / direction.z);
        let prep = RayPrep::new(origin, direction);
        let mut stack: Vec<u32> = vec![0];
        while let Some(ni) = stack.pop() {
            let node = &self.bvh.nodes[ni as usize];
            if node.bounds().ray_entry(origin, &inv, f64::INFINITY).is_none() {
                continue;
            }
            match node {
                Node::Leaf { start, count, .. } => {
                    for &t in &self.bvh.order[*start as usize..(*start + *count) as usize] {
                        let (a, b, c) = self.corners(t as usize);
                        if let Some((th, _)) = prep.intersect(&a, &b, &c) {
                            hits.push((th, t as usize));
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    stack.push(*right);
                    stack.push(*left);
                }
            }
        }
        hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        hits
    }

    /// Brute-force nearest ray hit, used to check the BVH path.
    pub fn ray_intersect_brute_force(&self, origin: &Vec3, direction: &Vec3) -> Option<RayHit> {
        let prep = RayPrep::new(origin, direction);
        let mut best: Option<(f64, usize, (f64, f64, f64))> = None;
        for t in 0..self.triangles.len() {
            let (a, b, c) = self.corners(t);
            if let Some((th, bary)) = prep.intersect(&a, &b, &c) {
                if best.is_none_or(|(bt, _, _)| th < bt) {
                    best = Some((th, t, bary));
                }
            }
        }
        best.map(|(t, tri, bary)| {
            let (a, b, c) = self.corners(tri);
            RayHit {
                t,
                point: a * bary.0 + b * bary.1 + c * bary.2,
                normal: self.shading_normal(tri, bary),
                triangle: tri,
            }
        })
    }

    /// `n` area-uniform samples carrying face normals; deterministic per seed.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Result<OrientedPointCloud> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample count must be >= 1".into()));
        }
        let total = self.total_area();
        if self.is_empty() || !(total > 0.0) {
            return Err(Error::EmptyMesh);
        }
        let mut cdf = Vec::with_capacity(self.areas.len());
        let mut acc = 0.0;
        for a in &self.areas {
            acc += a;
            cdf.push(acc);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::with_capacity(n);
        let mut normals = Vec::with_capacity(n);
        for _ in 0..n {
            let target = rng.random::<f64>() * acc;
            let tri = cdf.partition_point(|&c| c <= target).min(cdf.len() - 1);
            let (a, b, c) = self.corners(tri);
            let r1: f64 = rng.random::<f64>().sqrt();
            let r2: f64 = rng.random();
            let p = a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2);
            points.push(p);
            normals.push(self.face_normals[tri]);
        }
        Ok(OrientedPointCloud::new(points, normals))
    }

    /// One-ring vertex adjacency, sorted and deduplicated.
    pub fn vertex_neighbors(&self) -> Vec<Vec<u32>> {
        let mut nb: Vec<Vec<u32>> = vec![Vec::new(); self.vertices.len()];
        for t in &self.triangles {
            for k in 0..3 {
                let a = t[k];
                let b = t[(k + 1) % 3];
                nb[a as usize].push(b);
                nb[b as usize].push(a);
            }
        }
        for n in &mut nb {
            n.sort_unstable();
            n.dedup();
        }
        nb
    }
}

/// Precomputed state for the watertight ray/triangle test
/// (shear-and-scale into a ray-aligned frame, exact edge functions).
struct RayPrep {
    origin: Vec3,
    kx: usize,
    ky: usize,
    kz: usize,
    sx: f64,
    sy: f64,
    sz: f64,
}

impl RayPrep {
    fn new(origin: &Vec3, dir: &Vec3) -> Self {
        let abs = dir.abs();
        let kz = if abs.x >= abs.y && abs.x >= abs.z {
            0
        } else if abs.y >= abs.z {
            1
        } else {
            2
        };
        let mut kx = (kz + 1) % 3;
        let mut ky = (kx + 1) % 3;
        if dir[kz] < 0.0 {
            std::mem::swap(&mut kx, &mut ky);
        }
        RayPrep {
            origin: *origin,
            kx,
            ky,
            kz,
            sx: dir[kx] / dir[kz],
            sy: dir[ky] / dir[kz],
            sz: 1.0 / dir[kz],
        }
    }

    fn intersect(&self, a: &Vec3, b: &Vec3, c: &Vec3) -> Option<(f64, (f64, f64, f64))> {
        let (kx, ky, kz) = (self.kx, self.ky, self.kz);
        let a = a - self.origin;
        let b = b - self.origin;
        let c = c - self.origin;
        let ax = a[kx] - self.sx * a[kz];
        let ay = a[ky] - self.sy * a[kz];
        let bx = b[kx] - self.sx * b[kz];
        let by = b[ky] - self.sy * b[kz];
        let cx = c[kx] - self.sx * c[kz];
        let cy = c[ky] - self.sy * c[kz];
        let u = cx * by - cy * bx;
        let v = ax * cy - ay * cx;
        let w = bx * ay - by * ax;
        if (u < 0.0 || v < 0.0 || w < 0.0) && (u > 0.0 || v > 0.0 || w > 0.0) {
            return None;
        }
        let det = u + v + w;
        if det == 0.0 {
            return None;
        }
        let az = self.sz * a[kz];
        let bz = self.sz * b[kz];
        let cz = self.sz * c[kz];
        let t_scaled = u * az + v * bz + w * cz;
        if (det < 0.0 && t_scaled > 0.0) || (det > 0.0 && t_scaled < 0.0) {
            return None;
        }
        let inv = 1.0 / det;
        Some((t_scaled * inv, (u * inv, v * inv, w * inv)))
    }
}

/// Closest point on triangle `abc` to `p`, with barycentric weights.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> (Vec3, (f64, f64, f64)) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (*a, (1.0, 0.0, 0.0));
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (*b, (0.0, 1.0, 0.0));
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, (1.0 - v, v, 0.0));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (*c, (0.0, 0.0, 1.0));
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, (1.0 - w, 0.0, w));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, (0.0, 1.0 - w, w));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, (1.0 - v - w, v, w))
}

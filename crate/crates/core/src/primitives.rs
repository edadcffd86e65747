//! Procedural test shapes: icosphere, axis-aligned box, torus, bumpy sphere.

use std::collections::HashMap;

use crate::geometry::Vec3;
use crate::mesh::TriangleMesh;

/// The 12 unit-length icosahedron vertices built from the cyclic
/// permutations of `(0, ±1, ±φ)`, sorted lexicographically by `(x, y, z)`.
pub fn icosahedron_vertices() -> [Vec3; 12] {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v = Vec::with_capacity(12);
    for &s1 in &[-1.0, 1.0] {
        for &s2 in &[-1.0, 1.0] {
            v.push(Vec3::new(0.0, s1, s2 * phi));
            v.push(Vec3::new(s1, s2 * phi, 0.0));
            v.push(Vec3::new(s2 * phi, 0.0, s1));
        }
    }
    let mut v: Vec<Vec3> = v.into_iter().map(|p| p.normalize()).collect();
    v.sort_by(|a, b| {
        a.x.total_cmp(&b.x)
            .then(a.y.total_cmp(&b.y))
            .then(a.z.total_cmp(&b.z))
    });
    v.try_into().expect("12 vertices")
}

/// The 20 outward-oriented faces over [`icosahedron_vertices`].
pub fn icosahedron_faces() -> Vec<[u32; 3]> {
    let v = icosahedron_vertices();
    let edge = (v[0] - v[1..].iter().copied().min_by(|a, b| {
        (v[0] - a).norm().total_cmp(&(v[0] - b).norm())
    }).unwrap())
    .norm();
    let adjacent = |a: usize, b: usize| ((v[a] - v[b]).norm() - edge).abs() < 1e-9;
    let mut faces = Vec::with_capacity(20);
    for a in 0..12 {
        for b in a + 1..12 {
            for c in b + 1..12 {
                if adjacent(a, b) && adjacent(b, c) && adjacent(a, c) {
                    let n = (v[b] - v[a]).cross(&(v[c] - v[a]));
                    if n.dot(&(v[a] + v[b] + v[c])) > 0.0 {
                        faces.push([a as u32, b as u32, c as u32]);
                    } else {
                        faces.push([a as u32, c as u32, b as u32]);
                    }
                }
            }
        }
    }
    debug_assert_eq!(faces.len(), 20);
    faces
}

/// Icosahedron subdivided `subdivisions` times and projected to radius `radius`.
pub fn icosphere(radius: f64, subdivisions: u32) -> TriangleMesh {
    let mut verts: Vec<Vec3> = icosahedron_vertices().to_vec();
    let mut faces = icosahedron_faces();
    for _ in 0..subdivisions {
        let mut midpoint: HashMap<(u32, u32), u32> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut mid = |a: u32, b: u32, verts: &mut Vec<Vec3>| -> u32 {
            let key = (a.min(b), a.max(b));
            *midpoint.entry(key).or_insert_with(|| {
                verts.push(((verts[a as usize] + verts[b as usize]) * 0.5).normalize());
                (verts.len() - 1) as u32
            })
        };
        for [a, b, c] in faces {
            let ab = mid(a, b, &mut verts);
            let bc = mid(b, c, &mut verts);
            let ca = mid(c, a, &mut verts);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    let verts = verts.into_iter().map(|v| v * radius).collect();
    TriangleMesh::new(verts, faces).expect("icosphere is valid")
}

/// Largest gap between an icosphere facet and its circumscribed sphere.
pub fn icosphere_sagitta(radius: f64, subdivisions: u32) -> f64 {
    let m = icosphere(radius, subdivisions);
    m.triangles()
        .iter()
        .enumerate()
        .map(|(i, t)| radius - m.face_normal(i).dot(&m.vertices()[t[0] as usize]).abs())
        .fold(0.0, f64::max)
}

/// Axis-aligned box with outward-facing triangles.
pub fn box_mesh(min: Vec3, max: Vec3) -> TriangleMesh {
    let c = |x: usize, y: usize, z: usize| {
        Vec3::new(
            if x == 0 { min.x } else { max.x },
            if y == 0 { min.y } else { max.y },
            if z == 0 { min.z } else { max.z },
        )
    };
    let mut verts = Vec::with_capacity(8);
    for x in 0..2 {
        for y in 0..2 {
            for z in 0..2 {
                verts.push(c(x, y, z));
            }
        }
    }
    let idx = |x: u32, y: u32, z: u32| x * 4 + y * 2 + z;
    // Each face listed counter-clockwise seen from outside.
    let quads = [
        [idx(0, 0, 0), idx(0, 0, 1), idx(0, 1, 1), idx(0, 1, 0)], // -x
        [idx(1, 0, 0), idx(1, 1, 0), idx(1, 1, 1), idx(1, 0, 1)], // +x
        [idx(0, 0, 0), idx(1, 0, 0), idx(1, 0, 1), idx(0, 0, 1)], // -y
        [idx(0, 1, 0), idx(0, 1, 1), idx(1, 1, 1), idx(1, 1, 0)], // +y
        [idx(0, 0, 0), idx(0, 1, 0), idx(1, 1, 0), idx(1, 0, 0)], // -z
        [idx(0, 0, 1), idx(1, 0, 1), idx(1, 1, 1), idx(0, 1, 1)], // +z
    ];
    let mut tris = Vec::with_capacity(12);
    for q in quads {
        tris.push([q[0], q[1], q[2]]);
        tris.push([q[0], q[2], q[3]]);
    }
    TriangleMesh::new(verts, tris).expect("box is valid")
}

/// Torus around the y axis with major radius `major` and tube radius `minor`.
pub fn torus(major: f64, minor: f64, major_segments: u32, minor_segments: u32) -> TriangleMesh {
    let (nu, nv) = (major_segments, minor_segments);
    let mut verts = Vec::with_capacity((nu * nv) as usize);
    for i in 0..nu {
        let u = 2.0 * std::f64::consts::PI * i as f64 / nu as f64;
        for j in 0..nv {
            let v = 2.0 * std::f64::consts::PI * j as f64 / nv as f64;
            let ring = major + minor * v.cos();
            verts.push(Vec3::new(ring * u.cos(), minor * v.sin(), ring * u.sin()));
        }
    }
    let id = |i: u32, j: u32| (i % nu) * nv + (j % nv);
    let mut tris = Vec::with_capacity((2 * nu * nv) as usize);
    for i in 0..nu {
        for j in 0..nv {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            tris.push([a, c, b]);
            tris.push([a, d, c]);
        }
    }
    TriangleMesh::new(verts, tris).expect("torus is valid")
}

/// Icosphere with a smooth radial bump field; deterministic in `seed`.
pub fn bumpy_sphere(radius: f64, subdivisions: u32, amplitude: f64, seed: u64) -> TriangleMesh {
    let base = icosphere(1.0, subdivisions);
    let s = seed as f64;
    let verts = base
        .vertices()
        .iter()
        .map(|v| {
            let bump = (3.0 * v.x + 0.7 * s).sin() * (2.0 * v.y + 0.3 * s).cos()
                + 0.5 * (4.0 * v.z + 1.1 * s).sin();
            v * radius * (1.0 + amplitude * bump / 1.5)
        })
        .collect();
    base.with_vertices(verts).expect("bumpy sphere is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icosahedron_has_twelve_unit_vertices_and_twenty_faces() {
        let v = icosahedron_vertices();
        for p in &v {
            assert!((p.norm() - 1.0).abs() < 1e-15);
        }
        assert_eq!(icosahedron_faces().len(), 20);
    }

    #[test]
    fn closed_meshes_have_outward_normals() {
        for m in [icosphere(0.8, 2), box_mesh(Vec3::repeat(-0.3), Vec3::repeat(0.3)), torus(0.6, 0.2, 32, 16)] {
            // Divergence theorem: signed volume is positive for outward orientation.
            let vol: f64 = m
                .triangles()
                .iter()
                .map(|t| {
                    let (a, b, c) = (m.vertices()[t[0] as usize], m.vertices()[t[1] as usize], m.vertices()[t[2] as usize]);
                    a.dot(&b.cross(&c)) / 6.0
                })
                .sum();
            assert!(vol > 0.0);
        }
    }

    #[test]
    fn five_k_fixture_size() {
        assert_eq!(bumpy_sphere(0.7, 4, 0.1, 1).triangles().len(), 5120);
    }
}

use crate::geometry::{RigidTransform, Vec3};

/// Points with unit normals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OrientedPointCloud {
    points: Vec<Vec3>,
    normals: Vec<Vec3>,
}

impl OrientedPointCloud {
    /// # Panics
    /// If the two arrays differ in length.
    pub fn new(points: Vec<Vec3>, normals: Vec<Vec3>) -> Self {
        assert_eq!(points.len(), normals.len(), "points/normals length mismatch");
        OrientedPointCloud { points, normals }
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn normals(&self) -> &[Vec3] {
        &self.normals
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, p: Vec3, n: Vec3) {
        self.points.push(p);
        self.normals.push(n);
    }

    pub fn extend(&mut self, other: &OrientedPointCloud) {
        self.points.extend_from_slice(&other.points);
        self.normals.extend_from_slice(&other.normals);
    }

    pub fn transformed(&self, t: &RigidTransform) -> OrientedPointCloud {
        OrientedPointCloud {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
            normals: self.normals.iter().map(|n| t.apply_vector(n)).collect(),
        }
    }

    pub fn into_parts(self) -> (Vec<Vec3>, Vec<Vec3>) {
        (self.points, self.normals)
    }
}

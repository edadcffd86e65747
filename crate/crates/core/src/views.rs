//! Orthographic cameras and the 12-view icosahedral rig.
//!
//! A camera's pose maps camera coordinates to object coordinates. Camera
//! `+z` points toward the camera, so larger depth means nearer. Pixel `(i, j)`
//! has its center at camera-plane coordinates
//! `κ·(i + 0.5 − width/2), κ·(j + 0.5 − height/2)`.

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::geometry::{Mat3, RigidTransform, TransformRecord, Vec3};
use crate::primitives::icosahedron_vertices;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrthographicCamera {
    pub pose: RigidTransform,
    pub kappa: f64,
    pub width: usize,
    pub height: usize,
}

impl OrthographicCamera {
    pub fn new(pose: RigidTransform, kappa: f64, width: usize, height: usize) -> Result<Self> {
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(Error::InvalidArgument(format!("kappa must be positive, got {kappa}")));
        }
        if width < 2 || height < 2 {
            return Err(Error::InvalidArgument(format!(
                "image must be at least 2x2, got {width}x{height}"
            )));
        }
        if !pose.is_valid(1e-9) {
            return Err(Error::InvalidArgument("camera pose is not a rigid transform".into()));
        }
        Ok(OrthographicCamera {
            pose,
            kappa,
            width,
            height,
        })
    }

    /// Camera z-axis in object space (points toward the camera).
    pub fn z_axis(&self) -> Vec3 {
        self.pose.rotation.column(2).into_owned()
    }

    /// Unit viewing direction in object space.
    pub fn view_direction(&self) -> Vec3 {
        -self.z_axis()
    }

    /// Camera-frame point for a continuous pixel coordinate and depth.
    #[inline]
    pub fn pixel_to_camera(&self, px: f64, py: f64, depth: f64) -> Vec3 {
        Vec3::new(
            self.kappa * (px + 0.5 - self.width as f64 / 2.0),
            self.kappa * (py + 0.5 - self.height as f64 / 2.0),
            depth,
        )
    }

    #[inline]
    pub fn unproject(&self, px: f64, py: f64, depth: f64) -> Vec3 {
        self.pose.apply(&self.pixel_to_camera(px, py, depth))
    }

    /// Inverse of [`Self::unproject`]: `(p_x, p_y, depth)`.
    #[inline]
    pub fn project(&self, q: &Vec3) -> (f64, f64, f64) {
        let c = self.to_camera(q);
        (
            c.x / self.kappa - 0.5 + self.width as f64 / 2.0,
            c.y / self.kappa - 0.5 + self.height as f64 / 2.0,
            c.z,
        )
    }

    #[inline]
    pub fn to_camera(&self, q: &Vec3) -> Vec3 {
        self.pose.rotation.transpose() * (q - self.pose.translation)
    }

    /// Object-space vector into the camera frame.
    #[inline]
    pub fn rotate_to_camera(&self, v: &Vec3) -> Vec3 {
        self.pose.rotation.transpose() * v
    }

    /// Nearest integer pixel of a projection, if inside the image.
    #[inline]
    pub fn pixel_of(&self, px: f64, py: f64) -> Option<(usize, usize)> {
        let i = px.round();
        let j = py.round();
        (i >= 0.0 && j >= 0.0 && i < self.width as f64 && j < self.height as f64).then_some((i as usize, j as usize))
    }

    /// Camera with the pose pre-composed by `t` (object-space correction).
    pub fn transformed(&self, t: &RigidTransform) -> OrthographicCamera {
        OrthographicCamera {
            pose: t.compose(&self.pose),
            ..*self
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewRig {
    pub cameras: Vec<OrthographicCamera>,
    pub up_axis: Vec3,
}

/// Camera-to-object rotation for a camera at `position` looking at the origin.
pub fn look_at_origin(position: &Vec3, up: &Vec3) -> Mat3 {
    let z = position.normalize();
    let mut upv = *up;
    if (z.dot(up).abs() - 1.0).abs() < 1e-6 {
        upv = Vec3::x();
    }
    let y = (upv - z * z.dot(&upv)).normalize();
    let x = y.cross(&z);
    Mat3::from_columns(&[x, y, z])
}

impl ViewRig {
    /// 12 cameras at the vertices of a unit-circumradius icosahedron,
    /// `κ = 2 / min(width, height)`, camera frames centered at the origin.
    pub fn icosahedron(width: usize, height: usize) -> Result<ViewRig> {
        let up = Vec3::y();
        let kappa = 2.0 / width.min(height) as f64;
        let cameras = icosahedron_vertices()
            .iter()
            .map(|v| {
                let pose = RigidTransform {
                    rotation: look_at_origin(v, &up),
                    translation: Vec3::zeros(),
                };
                OrthographicCamera::new(pose, kappa, width, height)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ViewRig { cameras, up_axis: up })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn width(&self) -> usize {
        self.cameras[0].width
    }

    pub fn height(&self) -> usize {
        self.cameras[0].height
    }

    pub fn kappa(&self) -> f64 {
        self.cameras[0].kappa
    }

    /// Same rig with camera `v` pre-composed by `transforms[v]`.
    pub fn transformed(&self, transforms: &[RigidTransform]) -> ViewRig {
        ViewRig {
            cameras: self
                .cameras
                .iter()
                .zip(transforms)
                .map(|(c, t)| c.transformed(t))
                .collect(),
            up_axis: self.up_axis,
        }
    }

    fn check_uniform(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::InvalidArgument("rig has no cameras".into()));
        }
        let c0 = &self.cameras[0];
        for (i, c) in self.cameras.iter().enumerate() {
            if c.kappa != c0.kappa || c.width != c0.width || c.height != c0.height {
                return Err(Error::InvalidArgument(format!(
                    "camera {i} does not share kappa/size with camera 0"
                )));
            }
        }
        Ok(())
    }

    /// JSON manifest; every number printed with 17 significant digits.
    pub fn to_manifest_json(&self) -> String {
        let num = |x: f64| format!("{x:.16e}");
        let mut s = String::new();
        let _ = write!(
            s,
            "{{\n  \"width\": {},\n  \"height\": {},\n  \"kappa\": {},\n  \"cameras\": [",
            self.width(),
            self.height(),
            num(self.kappa())
        );
        for (i, c) in self.cameras.iter().enumerate() {
            let rec = TransformRecord::from(&c.pose);
            let rot: Vec<String> = rec.rotation.iter().map(|&x| num(x)).collect();
            let tr: Vec<String> = rec.translation.iter().map(|&x| num(x)).collect();
            let _ = write!(
                s,
                "{}\n    {{\"rotation\": [{}], \"translation\": [{}]}}",
                if i == 0 { "" } else { "," },
                rot.join(", "),
                tr.join(", ")
            );
        }
        s.push_str("\n  ]\n}\n");
        s
    }

    pub fn from_manifest_json(text: &str) -> std::result::Result<ViewRig, String> {
        #[derive(Deserialize)]
        struct Manifest {
            width: usize,
            height: usize,
            kappa: f64,
            cameras: Vec<TransformRecord>,
        }
        let m: Manifest = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let cameras = m
            .cameras
            .iter()
            .enumerate()
            .map(|(i, rec)| {
                let pose = rec.to_transform().map_err(|e| format!("camera {i}: {e}"))?;
                OrthographicCamera::new(pose, m.kappa, m.width, m.height).map_err(|e| format!("camera {i}: {e}"))
            })
            .collect::<std::result::Result<Vec<_>, String>>()?;
        let rig = ViewRig {
            cameras,
            up_axis: Vec3::y(),
        };
        rig.check_uniform().map_err(|e| e.to_string())?;
        Ok(rig)
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_manifest_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read_manifest(path: &Path) -> Result<ViewRig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ViewRig::from_manifest_json(&text).map_err(|r| Error::format(path, r))
    }
}

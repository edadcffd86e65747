//! C ABI over the `mvfuse` library.
//!
//! Objects are opaque handles created by `mvf_*` constructors and released
//! with the matching `*_free`. Every fallible call returns an [`MvfStatus`];
//! on failure, [`mvf_last_error_message`] describes the error for the
//! calling thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mvfuse::error::Error;
use mvfuse::fusion::{fuse, FusionConfig};
use mvfuse::maps::{read_mapset, write_mapset, MapSet};
use mvfuse::mesh::TriangleMesh;
use mvfuse::pointcloud::OrientedPointCloud;
use mvfuse::render::{perturb_mapset, render_mapset, PerturbationSpec, RenderOptions};
use mvfuse::views::ViewRig;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MvfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    /// Missing, unreadable or malformed file.
    Io = 3,
    /// Input data failed validation.
    Validation = 4,
    /// NaN or solver failure.
    Numerical = 5,
    /// Internal panic; the handle arguments should be considered poisoned.
    Panic = 6,
}

pub struct MvfMesh(TriangleMesh);
pub struct MvfMapSet(MapSet);
pub struct MvfPointCloud(OrientedPointCloud);

/// Fusion weights and iteration controls.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct MvfFusionConfig {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    pub outer_iterations: u32,
    pub early_exit: f64,
    /// Visibility depth slack; zero or negative means four pixels.
    pub occlusion_threshold: f64,
}

impl From<&MvfFusionConfig> for FusionConfig {
    fn from(c: &MvfFusionConfig) -> Self {
        FusionConfig {
            w1: c.w1,
            w2: c.w2,
            w3: c.w3,
            w4: c.w4,
            outer_iterations: c.outer_iterations as usize,
            early_exit: c.early_exit,
            occlusion_threshold: (c.occlusion_threshold > 0.0).then_some(c.occlusion_threshold),
            ..FusionConfig::default()
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MvfStatus {
    match e {
        Error::Io { .. } | Error::MissingFile { .. } | Error::Format { .. } => MvfStatus::Io,
        Error::Validation { .. } | Error::DimensionMismatch { .. } => MvfStatus::Validation,
        Error::Numerical(_) => MvfStatus::Numerical,
        _ => MvfStatus::InvalidArgument,
    }
}

struct Failure(MvfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(MvfStatus::NullArgument, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MvfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MvfStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(&format!("internal panic: {msg}"));
            MvfStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Failure(MvfStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

unsafe fn store<T>(out: *mut *mut T, value: T) {
    unsafe { *out = Box::into_raw(Box::new(value)) };
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mvf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mvf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn mvf_fusion_config_default() -> MvfFusionConfig {
    let d = FusionConfig::default();
    MvfFusionConfig {
        w1: d.w1,
        w2: d.w2,
        w3: d.w3,
        w4: d.w4,
        outer_iterations: d.outer_iterations as u32,
        early_exit: d.early_exit,
        occlusion_threshold: 0.0,
    }
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mvf_mesh_read_obj(path: *const c_char, out: *mut *mut MvfMesh) -> MvfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = unsafe { path_arg(path, "path") }?;
        let mesh = mvfuse::io::read_obj(&path)?;
        unsafe { store(out, MvfMesh(mesh)) };
        Ok(())
    })
}

/// Icosphere centered at the origin.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mvf_mesh_icosphere(radius: f64, subdivisions: u32, out: *mut *mut MvfMesh) -> MvfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if !(radius > 0.0) || subdivisions > 7 {
            return Err(Failure(MvfStatus::InvalidArgument, "radius must be positive, subdivisions <= 7".into()));
        }
        unsafe { store(out, MvfMesh(mvfuse::primitives::icosphere(radius, subdivisions))) };
        Ok(())
    })
}

/// # Safety
/// `mesh` must come from an `mvf_mesh_*` constructor or be null.
#[no_mangle]
pub unsafe extern "C" fn mvf_mesh_vertex_count(mesh: *const MvfMesh) -> usize {
    unsafe { mesh.as_ref() }.map_or(0, |m| m.0.vertices().len())
}

/// # Safety
/// `mesh` must come from an `mvf_mesh_*` constructor or be null.
#[no_mangle]
pub unsafe extern "C" fn mvf_mesh_triangle_count(mesh: *const MvfMesh) -> usize {
    unsafe { mesh.as_ref() }.map_or(0, |m| m.0.triangles().len())
}

/// # Safety
/// `mesh` must come from an `mvf_mesh_*` constructor or be null; it is
/// invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn mvf_mesh_free(mesh: *mut MvfMesh) {
    if !mesh.is_null() {
        drop(unsafe { Box::from_raw(mesh) });
    }
}

/// Renders the 12-view icosahedron rig at `width × height`.
///
/// # Safety
/// `mesh` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mvf_render(
    mesh: *const MvfMesh,
    width: u32,
    height: u32,
    out: *mut *mut MvfMapSet,
) -> MvfStatus {
    guard(|| {
        let mesh = unsafe { handle(mesh, "mesh") }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let rig = ViewRig::icosahedron(width as usize, height as usize)?;
        let maps = render_mapset(&mesh.0, &rig, RenderOptions::default())?;
        unsafe { store(out, MvfMapSet(maps)) };
        Ok(())
    })
}

/// Per-view bias `U(-bias, bias)` plus Gaussian depth noise.
///
/// # Safety
/// `maps` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mvf_perturb(
    maps: *const MvfMapSet,
    bias: f64,
    noise: f64,
    seed: u64,
    out: *mut *mut MvfMapSet,
) -> MvfStatus {
    guard(|| {
        let maps = unsafe { handle(maps, "maps") }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = PerturbationSpec { view_bias: bias, depth_noise: noise, seed, ..Default::default() };
        let noisy = perturb_mapset(&maps.0, &spec)?;
        unsafe { store(out, MvfMapSet(noisy)) };
        Ok(())
    })
}

/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mvf_mapset_read(dir: *const c_char, out: *mut *mut MvfMapSet) -> MvfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = unsafe { path_arg(dir, "dir") }?;
        let maps = read_mapset(&dir)?;
        unsafe { store(out, MvfMapSet(maps)) };
        Ok(())
    })
}

/// # Safety
/// `maps` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mvf_mapset_write(maps: *const MvfMapSet, dir: *const c_char) -> MvfStatus {
    guard(|| {
        let maps = unsafe { handle(maps, "maps") }?;
        let dir = unsafe { path_arg(dir, "dir") }?;
        write_mapset(&dir, &maps.0)?;
        Ok(())
    })
}

/// # Safety
/// `maps` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn mvf_mapset_view_count(maps: *const MvfMapSet) -> usize {
    unsafe { maps.as_ref() }.map_or(0, |m| m.0.views.len())
}

/// # Safety
/// `maps` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn mvf_mapset_foreground_count(maps: *const MvfMapSet) -> usize {
    unsafe { maps.as_ref() }.map_or(0, |m| m.0.foreground_count())
}

/// # Safety
/// `maps` must be a live handle or null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn mvf_mapset_free(maps: *mut MvfMapSet) {
    if !maps.is_null() {
        drop(unsafe { Box::from_raw(maps) });
    }
}

/// Outlier removal then joint depth optimization. `config` may be null for
/// defaults. Either output pointer may be null if that result is unwanted.
///
/// # Safety
/// `maps` must be a live handle; non-null pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mvf_fuse(
    maps: *const MvfMapSet,
    config: *const MvfFusionConfig,
    out_maps: *mut *mut MvfMapSet,
    out_cloud: *mut *mut MvfPointCloud,
) -> MvfStatus {
    guard(|| {
        let maps = unsafe { handle(maps, "maps") }?;
        let cfg = match unsafe { config.as_ref() } {
            Some(c) => FusionConfig::from(c),
            None => FusionConfig::default(),
        };
        let fused = fuse(&maps.0, &cfg)?;
        if !out_maps.is_null() {
            unsafe { store(out_maps, MvfMapSet(fused.maps)) };
        }
        if !out_cloud.is_null() {
            unsafe { store(out_cloud, MvfPointCloud(fused.cloud)) };
        }
        Ok(())
    })
}

/// Concatenated per-view points of a map set, without optimization.
///
/// # Safety
/// `maps` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mvf_generate_points(maps: *const MvfMapSet, out: *mut *mut MvfPointCloud) -> MvfStatus {
    guard(|| {
        let maps = unsafe { handle(maps, "maps") }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cloud = mvfuse::pointgen::concatenate(&mvfuse::pointgen::generate_points(&maps.0));
        unsafe { store(out, MvfPointCloud(cloud)) };
        Ok(())
    })
}

/// # Safety
/// `cloud` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn mvf_cloud_len(cloud: *const MvfPointCloud) -> usize {
    unsafe { cloud.as_ref() }.map_or(0, |c| c.0.len())
}

/// Copies `xyz` triples of points and, if `normals` is non-null, of normals.
/// Both buffers must hold `3 * capacity` doubles; fails if the cloud has
/// more than `capacity` points.
///
/// # Safety
/// Buffers must be valid for `3 * capacity` writes.
#[no_mangle]
pub unsafe extern "C" fn mvf_cloud_copy(
    cloud: *const MvfPointCloud,
    points: *mut f64,
    normals: *mut f64,
    capacity: usize,
) -> MvfStatus {
    guard(|| {
        let cloud = unsafe { handle(cloud, "cloud") }?;
        if points.is_null() {
            return Err(null("points"));
        }
        let n = cloud.0.len();
        if n > capacity {
            return Err(Failure(MvfStatus::InvalidArgument, format!("cloud has {n} points, capacity {capacity}")));
        }
        let p = unsafe { std::slice::from_raw_parts_mut(points, 3 * n) };
        for (dst, src) in p.chunks_exact_mut(3).zip(cloud.0.points()) {
            dst.copy_from_slice(src.as_slice());
        }
        if !normals.is_null() {
            let q = unsafe { std::slice::from_raw_parts_mut(normals, 3 * n) };
            for (dst, src) in q.chunks_exact_mut(3).zip(cloud.0.normals()) {
                dst.copy_from_slice(src.as_slice());
            }
        }
        Ok(())
    })
}

/// # Safety
/// `cloud` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mvf_cloud_write_ply(cloud: *const MvfPointCloud, path: *const c_char) -> MvfStatus {
    guard(|| {
        let cloud = unsafe { handle(cloud, "cloud") }?;
        let path = unsafe { path_arg(path, "path") }?;
        mvfuse::io::write_ply(&path, &cloud.0)?;
        Ok(())
    })
}

/// # Safety
/// `cloud` must be a live handle or null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn mvf_cloud_free(cloud: *mut MvfPointCloud) {
    if !cloud.is_null() {
        drop(unsafe { Box::from_raw(cloud) });
    }
}

/// Mean distance from the cloud's points to the mesh surface.
///
/// # Safety
/// Handles must be live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mvf_mean_surface_distance(
    cloud: *const MvfPointCloud,
    mesh: *const MvfMesh,
    out: *mut f64,
) -> MvfStatus {
    guard(|| {
        let cloud = unsafe { handle(cloud, "cloud") }?;
        let mesh = unsafe { handle(mesh, "mesh") }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let d = mvfuse::metrics::chamfer_directional(&cloud.0, &mesh.0, 1, 0)?;
        unsafe { *out = d };
        Ok(())
    })
}

/// Symmetric Chamfer distance between a cloud and a mesh sampled with
/// `samples` points.
///
/// # Safety
/// Handles must be live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mvf_chamfer(
    cloud: *const MvfPointCloud,
    mesh: *const MvfMesh,
    samples: usize,
    seed: u64,
    out: *mut f64,
) -> MvfStatus {
    guard(|| {
        let cloud = unsafe { handle(cloud, "cloud") }?;
        let mesh = unsafe { handle(mesh, "mesh") }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let d = mvfuse::metrics::chamfer(&cloud.0, &mesh.0, samples, seed)?;
        unsafe { *out = d };
        Ok(())
    })
}

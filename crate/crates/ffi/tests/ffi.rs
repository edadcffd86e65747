use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use mvfuse_ffi::*;

fn last_error() -> String {
    let p = mvf_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn render_fuse_and_measure() {
    unsafe {
        let mut mesh = ptr::null_mut();
        assert_eq!(mvf_mesh_icosphere(0.8, 3, &mut mesh), MvfStatus::Ok);
        assert_eq!(mvf_mesh_triangle_count(mesh), 1280);

        let mut maps = ptr::null_mut();
        assert_eq!(mvf_render(mesh, 48, 48, &mut maps), MvfStatus::Ok);
        assert_eq!(mvf_mapset_view_count(maps), 12);
        let fg = mvf_mapset_foreground_count(maps);
        assert!(fg > 0);

        let mut noisy = ptr::null_mut();
        assert_eq!(mvf_perturb(maps, 0.02, 0.005, 3, &mut noisy), MvfStatus::Ok);
        let mut naive = ptr::null_mut();
        assert_eq!(mvf_generate_points(noisy, &mut naive), MvfStatus::Ok);

        let cfg = mvf_fusion_config_default();
        assert_eq!(cfg.w3, 0.3);
        assert_eq!(cfg.outer_iterations, 5);
        let (mut fused_maps, mut cloud) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(mvf_fuse(noisy, &cfg, &mut fused_maps, &mut cloud), MvfStatus::Ok);
        let n = mvf_cloud_len(cloud);
        assert!(n > 0 && n <= fg);

        let (mut d_fused, mut d_naive) = (0.0, 0.0);
        assert_eq!(mvf_mean_surface_distance(cloud, mesh, &mut d_fused), MvfStatus::Ok);
        assert_eq!(mvf_mean_surface_distance(naive, mesh, &mut d_naive), MvfStatus::Ok);
        assert!(d_fused < d_naive, "{d_fused} vs {d_naive}");

        let mut pts = vec![0.0; 3 * n];
        let mut nrm = vec![0.0; 3 * n];
        assert_eq!(mvf_cloud_copy(cloud, pts.as_mut_ptr(), nrm.as_mut_ptr(), n), MvfStatus::Ok);
        assert!(pts.iter().all(|v| v.is_finite()));
        let norm = (nrm[0] * nrm[0] + nrm[1] * nrm[1] + nrm[2] * nrm[2]).sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(mvf_cloud_copy(cloud, pts.as_mut_ptr(), ptr::null_mut(), n - 1), MvfStatus::InvalidArgument);

        let mut c = 0.0;
        assert_eq!(mvf_chamfer(cloud, mesh, 2000, 1, &mut c), MvfStatus::Ok);
        assert!(c > 0.0 && c < 0.05);

        mvf_cloud_free(cloud);
        mvf_cloud_free(naive);
        mvf_mapset_free(fused_maps);
        mvf_mapset_free(noisy);
        mvf_mapset_free(maps);
        mvf_mesh_free(mesh);
    }
}

#[test]
fn mapset_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let d = CString::new(dir.path().join("maps").to_str().unwrap()).unwrap();
    unsafe {
        let mut mesh = ptr::null_mut();
        assert_eq!(mvf_mesh_icosphere(0.5, 2, &mut mesh), MvfStatus::Ok);
        let mut maps = ptr::null_mut();
        assert_eq!(mvf_render(mesh, 32, 32, &mut maps), MvfStatus::Ok);
        assert_eq!(mvf_mapset_write(maps, d.as_ptr()), MvfStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(mvf_mapset_read(d.as_ptr(), &mut back), MvfStatus::Ok);
        assert_eq!(mvf_mapset_foreground_count(back), mvf_mapset_foreground_count(maps));
        mvf_mapset_free(back);
        mvf_mapset_free(maps);
        mvf_mesh_free(mesh);
    }
}

#[test]
fn errors_set_status_and_message() {
    unsafe {
        let mut mesh = ptr::null_mut();
        let missing = CString::new("/nonexistent/shape.obj").unwrap();
        assert_eq!(mvf_mesh_read_obj(missing.as_ptr(), &mut mesh), MvfStatus::Io);
        assert!(mesh.is_null());
        assert!(last_error().contains("/nonexistent/shape.obj"));

        assert_eq!(mvf_mesh_read_obj(ptr::null(), &mut mesh), MvfStatus::NullArgument);
        assert!(last_error().contains("path"));

        assert_eq!(mvf_mesh_icosphere(-1.0, 2, &mut mesh), MvfStatus::InvalidArgument);
        let mut maps = ptr::null_mut();
        assert_eq!(mvf_render(ptr::null(), 32, 32, &mut maps), MvfStatus::NullArgument);

        assert_eq!(mvf_mesh_icosphere(0.5, 1, &mut mesh), MvfStatus::Ok);
        assert_eq!(mvf_render(mesh, 1, 1, &mut maps), MvfStatus::InvalidArgument);
        let mut noisy = ptr::null_mut();
        assert_eq!(mvf_render(mesh, 16, 16, &mut maps), MvfStatus::Ok);
        assert_eq!(mvf_perturb(maps, -1.0, 0.0, 0, &mut noisy), MvfStatus::InvalidArgument);
        mvf_mapset_free(maps);
        mvf_mesh_free(mesh);

        // Freeing null is a no-op.
        mvf_mesh_free(ptr::null_mut());
        mvf_mapset_free(ptr::null_mut());
        mvf_cloud_free(ptr::null_mut());
        assert_eq!(mvf_mesh_vertex_count(ptr::null()), 0);
    }
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(mvf_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export_and_compiles() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(root.join("include/mvfuse.h")).unwrap();
    let source = std::fs::read_to_string(root.join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = source
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    // Syntax-check the header from C when a compiler is available.
    if let Ok(status) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
        .arg(root.join("include"))
        .arg(root.join("tests/c/smoke.c"))
        .status()
    {
        assert!(status.success(), "C smoke program does not compile against the header");
    }
}

#[test]
fn c_program_links_and_runs() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    // Test binaries live in target/<profile>/deps; the static library is
    // built next to deps.
    let exe = std::env::current_exe().unwrap();
    let lib = exe.parent().unwrap().parent().unwrap().join("libmvfuse_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg("-I")
        .arg(root.join("include"))
        .arg(root.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with(env!("CARGO_PKG_VERSION")), "{text}");
}

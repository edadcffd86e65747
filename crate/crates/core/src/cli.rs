//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation failure,
//! 3 numerical failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::PipelineConfig;
use crate::deform::{deform_to_contours, ContourConstraintSet, ContourRecord, MIN_CONTOUR_POINTS};
use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionConfig, TargetSampling};
use crate::geometry::TransformRecord;
use crate::icp::{align_rig, apply_alignment};
use crate::io::{read_obj, read_ply, write_obj, write_ply};
use crate::logging::{dispatch, log_fusion_report, LogTarget};
use crate::maps::{read_mapset, write_mapset, MapSet};
use crate::mesh::TriangleMesh;
use crate::metrics::{evaluate, MetricsParams, MetricsRecord, Shape, VoxelMode};
use crate::pointcloud::OrientedPointCloud;
use crate::pointgen::{concatenate, generate_points};
use crate::render::{extract_silhouette_contour, render_mapset, synthesize_mapset};
use crate::views::ViewRig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "mvfuse", version, about = "Fuse multi-view depth and normal maps into an oriented point cloud")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML configuration; flags override its values
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads, 0 for one per core
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Seed for every stochastic step [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Append JSON-lines logs to FILE instead of stderr
    #[arg(long, global = true, value_name = "FILE")]
    pub log: Option<PathBuf>,
    /// Disable logging
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render oracle depth, normal and mask maps of a mesh
    Render(RenderCmd),
    /// Add depth offset, per-view bias, pixel noise and rigid jitter to maps
    Perturb(PerturbCmd),
    /// Rigidly align the per-view point sets and fold the fix into the rig
    Icp(IcpCmd),
    /// Remove outliers and jointly optimize all depths
    Fuse(FuseCmd),
    /// Deform a mesh toward per-view silhouette contours
    Deform(DeformCmd),
    /// Compare a reconstruction against a reference shape
    Metrics(MetricsCmd),
    /// Render, perturb, align, fuse and evaluate in one run
    Pipeline(PipelineCmd),
}

#[derive(Debug, Args)]
pub struct RigArgs {
    /// Number of icosahedron views [default: 12]
    #[arg(long)]
    pub views: Option<usize>,
    /// Map width in pixels [default: 256]
    #[arg(long)]
    pub width: Option<usize>,
    /// Map height in pixels [default: 256]
    #[arg(long)]
    pub height: Option<usize>,
    /// Interpolate vertex normals when rendering [default: false]
    #[arg(long)]
    pub smooth_normals: bool,
}

impl RigArgs {
    fn apply(&self, c: &mut PipelineConfig) {
        set(&mut c.rig.views, self.views);
        set(&mut c.rig.width, self.width);
        set(&mut c.rig.height, self.height);
        c.rig.smooth_normals |= self.smooth_normals;
    }
}

#[derive(Debug, Args)]
pub struct FusionArgs {
    /// Weight of the network-prediction term [default: 1.0]
    #[arg(long)]
    pub w1: Option<f64>,
    /// Weight of the normal-orthogonality term [default: 1.0]
    #[arg(long)]
    pub w2: Option<f64>,
    /// Weight of the cross-view depth term [default: 0.3]
    #[arg(long)]
    pub w3: Option<f64>,
    /// Weight of the cross-view tangent term [default: 0.3]
    #[arg(long)]
    pub w4: Option<f64>,
    /// Outer fusion iterations [default: 5]
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Stop once the relative energy change drops below this [default: 0.0001]
    #[arg(long)]
    pub early_exit: Option<f64>,
    /// Visibility depth slack [default: 4 pixels]
    #[arg(long)]
    pub occlusion_threshold: Option<f64>,
    /// Target depth sampling, bilinear or nearest [default: bilinear]
    #[arg(long, value_parser = parse_sampling)]
    pub target_sampling: Option<TargetSampling>,
}

fn parse_sampling(s: &str) -> std::result::Result<TargetSampling, String> {
    match s {
        "bilinear" => Ok(TargetSampling::Bilinear),
        "nearest" => Ok(TargetSampling::Nearest),
        other => Err(format!("expected bilinear or nearest, got {other:?}")),
    }
}

impl FusionArgs {
    fn apply(&self, c: &mut FusionConfig) {
        set(&mut c.w1, self.w1);
        set(&mut c.w2, self.w2);
        set(&mut c.w3, self.w3);
        set(&mut c.w4, self.w4);
        set(&mut c.outer_iterations, self.iterations);
        set(&mut c.early_exit, self.early_exit);
        if self.occlusion_threshold.is_some() {
            c.occlusion_threshold = self.occlusion_threshold;
        }
        set(&mut c.target_sampling, self.target_sampling);
    }
}

#[derive(Debug, Args)]
pub struct IcpArgs {
    /// Skip rigid alignment [default: false]
    #[arg(long)]
    pub no_icp: bool,
    /// ICP iterations per view [default: 30]
    #[arg(long)]
    pub icp_iterations: Option<usize>,
    /// Round-robin passes over the views [default: 3]
    #[arg(long)]
    pub icp_sweeps: Option<usize>,
}

impl IcpArgs {
    fn apply(&self, c: &mut PipelineConfig) {
        if self.no_icp {
            c.icp.enabled = false;
        }
        set(&mut c.icp.max_iterations, self.icp_iterations);
        set(&mut c.icp.sweeps, self.icp_sweeps);
    }
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Surface samples per mesh [default: 10000]
    #[arg(long)]
    pub samples: Option<usize>,
    /// Voxel grid resolution per axis [default: 128]
    #[arg(long)]
    pub voxel_resolution: Option<usize>,
    /// Use surface-only voxelization for open meshes [default: false]
    #[arg(long)]
    pub surface_voxels: bool,
    /// One-way recon to reference Chamfer instead of the symmetric mean [default: false]
    #[arg(long)]
    pub directional_chamfer: bool,
}

impl MetricsArgs {
    fn apply(&self, c: &mut MetricsParams) {
        set(&mut c.samples, self.samples);
        set(&mut c.voxel_resolution, self.voxel_resolution);
        if self.surface_voxels {
            c.voxel_mode = VoxelMode::Surface;
        }
        c.directional_chamfer |= self.directional_chamfer;
    }
}

#[derive(Debug, Args)]
pub struct RenderCmd {
    /// Input mesh (OBJ)
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    /// Output map directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub rig: RigArgs,
}

#[derive(Debug, Args)]
pub struct PerturbCmd {
    /// Input map directory
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Output map directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated offset, bias, noise, jitter_deg, jitter_trans, normal_noise values, e.g. bias=0.02,noise=0.005
    #[arg(long)]
    pub perturb: Option<String>,
    /// Mesh to re-render from; required for rigid jitter
    #[arg(long)]
    pub mesh: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IcpCmd {
    /// Input map directory
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Output map directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// ICP iterations per view [default: 30]
    #[arg(long)]
    pub icp_iterations: Option<usize>,
    /// Round-robin passes over the views [default: 3]
    #[arg(long)]
    pub icp_sweeps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FuseCmd {
    /// Input map directory
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Output directory for fused maps, points.ply and report.json
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub fusion: FusionArgs,
}

#[derive(Debug, Args)]
pub struct DeformCmd {
    /// Mesh to deform (OBJ)
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    /// Output directory for deformed.obj and report.json
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Contour JSON: [{"view_index": v, "points": [[x, y], ...]}]
    #[arg(long)]
    pub contours: Option<PathBuf>,
    /// Map directory whose rig is used, and whose masks give the contours when --contours is absent
    #[arg(long)]
    pub maps: Option<PathBuf>,
    /// Laplacian weight [default: 1.0]
    #[arg(long)]
    pub laplacian_weight: Option<f64>,
    /// Contour weight [default: 0.5]
    #[arg(long)]
    pub contour_weight: Option<f64>,
    /// Extra correspondence rounds [default: 0]
    #[arg(long)]
    pub reassign_iterations: Option<usize>,
    #[command(flatten)]
    pub rig: RigArgs,
}

#[derive(Debug, Args)]
pub struct MetricsCmd {
    /// Reconstruction: OBJ mesh or PLY point cloud
    #[arg(long)]
    pub recon: PathBuf,
    /// Reference: OBJ mesh or PLY point cloud
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Reconstructed map directory, for the depth-map error
    #[arg(long)]
    pub recon_maps: Option<PathBuf>,
    /// Reference map directory, for the depth-map error
    #[arg(long)]
    pub ref_maps: Option<PathBuf>,
    /// Also write the JSON record to this file
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub metrics: MetricsArgs,
}

#[derive(Debug, Args)]
pub struct PipelineCmd {
    /// Ground-truth mesh (OBJ)
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Perturbation, e.g. bias=0.02,noise=0.005 [default: none]
    #[arg(long)]
    pub perturb: Option<String>,
    #[command(flatten)]
    pub rig: RigArgs,
    #[command(flatten)]
    pub fusion: FusionArgs,
    #[command(flatten)]
    pub icp: IcpArgs,
    #[command(flatten)]
    pub metrics: MetricsArgs,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError { code: e.exit_code(), message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> CliError {
    CliError { code: EXIT_USAGE, message: message.into() }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn required(p: &Option<PathBuf>, flag: &str, fallback: &Path) -> CliResult<PathBuf> {
    match p {
        Some(p) => Ok(p.clone()),
        None if !fallback.as_os_str().is_empty() => Ok(fallback.to_path_buf()),
        None => Err(usage(format!("missing required --{flag}"))),
    }
}

/// Refuses an output directory that is, or contains, an input.
fn check_output(out: &Path, inputs: &[&Path]) -> CliResult<()> {
    let canon = |p: &Path| std::fs::canonicalize(p).ok();
    if let Some(o) = canon(out) {
        for i in inputs {
            if let Some(i) = canon(i) {
                if i == o || i.starts_with(&o) {
                    return Err(usage(format!("output {} would overwrite input {}", out.display(), i.display())));
                }
            }
        }
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

enum LoadedShape {
    Mesh(TriangleMesh),
    Points(OrientedPointCloud),
}

impl LoadedShape {
    fn read(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("obj") => Ok(LoadedShape::Mesh(read_obj(path)?)),
            Some("ply") => Ok(LoadedShape::Points(read_ply(path)?)),
            _ => {
                if !path.exists() {
                    return Err(Error::MissingFile { path: path.to_path_buf(), view: None });
                }
                Err(Error::format(path, "expected an .obj mesh or a .ply point cloud"))
            }
        }
    }

    fn shape(&self) -> Shape<'_> {
        match self {
            LoadedShape::Mesh(m) => Shape::Mesh(m),
            LoadedShape::Points(p) => Shape::Points(p),
        }
    }
}

/// Parses and runs; returns the process exit code. Errors go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn load_config(global: &GlobalArgs) -> CliResult<PipelineConfig> {
    let mut cfg = match &global.config {
        Some(p) => PipelineConfig::read(p)?,
        None => PipelineConfig::default(),
    };
    cfg.apply_env()?;
    set(&mut cfg.seed, global.seed);
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    let mut cfg = load_config(&cli.global)?;
    let target = match (&cli.global.log, cli.global.quiet) {
        (_, true) => LogTarget::Off,
        (Some(p), false) => LogTarget::File(p),
        (None, false) => LogTarget::Stderr,
    };
    let dispatcher = dispatch(target)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads)
        .build()
        .map_err(|e| usage(format!("thread pool: {e}")))?;
    // The default dispatcher is thread-local, so set it on the pool thread.
    pool.install(|| {
        tracing::dispatcher::with_default(&dispatcher, || {
            apply_flags(&cli.command, &mut cfg)?;
            cfg.validate()?;
            tracing::info!(
                event = "start",
                command = command_name(&cli.command),
                version = env!("CARGO_PKG_VERSION"),
                seed = cfg.seed,
                threads = rayon::current_num_threads(),
                config = %serde_json::to_string(&cfg).expect("config serializes"),
            );
            let out = dispatch_command(&cli.command, &cfg);
            match &out {
                Ok(()) => tracing::info!(event = "done"),
                Err(e) => tracing::error!(event = "failed", code = e.code, message = %e.message),
            }
            out
        })
    })
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Render(_) => "render",
        Command::Perturb(_) => "perturb",
        Command::Icp(_) => "icp",
        Command::Fuse(_) => "fuse",
        Command::Deform(_) => "deform",
        Command::Metrics(_) => "metrics",
        Command::Pipeline(_) => "pipeline",
    }
}

fn apply_flags(command: &Command, cfg: &mut PipelineConfig) -> CliResult<()> {
    match command {
        Command::Render(c) => c.rig.apply(cfg),
        Command::Perturb(c) => {
            if let Some(p) = &c.perturb {
                cfg.perturb.apply_overrides(p)?;
            }
        }
        Command::Icp(c) => {
            set(&mut cfg.icp.max_iterations, c.icp_iterations);
            set(&mut cfg.icp.sweeps, c.icp_sweeps);
        }
        Command::Fuse(c) => c.fusion.apply(&mut cfg.fusion),
        Command::Deform(c) => {
            c.rig.apply(cfg);
            set(&mut cfg.deform.laplacian_weight, c.laplacian_weight);
            set(&mut cfg.deform.contour_weight, c.contour_weight);
            set(&mut cfg.deform.reassign_iterations, c.reassign_iterations);
        }
        Command::Metrics(c) => c.metrics.apply(&mut cfg.metrics),
        Command::Pipeline(c) => {
            c.rig.apply(cfg);
            c.fusion.apply(&mut cfg.fusion);
            c.icp.apply(cfg);
            c.metrics.apply(&mut cfg.metrics);
            if let Some(p) = &c.perturb {
                cfg.perturb.apply_overrides(p)?;
            }
        }
    }
    cfg.metrics.seed = cfg.seed;
    Ok(())
}

fn dispatch_command(command: &Command, cfg: &PipelineConfig) -> CliResult<()> {
    match command {
        Command::Render(c) => cmd_render(c, cfg),
        Command::Perturb(c) => cmd_perturb(c, cfg),
        Command::Icp(c) => cmd_icp(c, cfg),
        Command::Fuse(c) => cmd_fuse(c, cfg),
        Command::Deform(c) => cmd_deform(c, cfg),
        Command::Metrics(c) => cmd_metrics(c, cfg),
        Command::Pipeline(c) => cmd_pipeline(c, cfg),
    }
}

fn cmd_render(c: &RenderCmd, cfg: &PipelineConfig) -> CliResult<()> {
    let mesh_path = required(&c.mesh, "mesh", &cfg.paths.mesh)?;
    let out = required(&c.out, "out", &cfg.paths.output)?;
    check_output(&out, &[&mesh_path])?;
    let mesh = read_obj(&mesh_path)?;
    let maps = render_mapset(&mesh, &cfg.rig.build()?, cfg.rig.render_options())?;
    write_mapset(&out, &maps)?;
    tracing::info!(event = "render", views = maps.views.len(), foreground = maps.foreground_count());
    Ok(())
}

fn cmd_perturb(c: &PerturbCmd, cfg: &PipelineConfig) -> CliResult<()> {
    let input = required(&c.input, "in", &cfg.paths.input)?;
    let out = required(&c.out, "out", &cfg.paths.output)?;
    check_output(&out, &[&input])?;
    let clean = read_mapset(&input)?;
    let spec = cfg.perturb.spec(cfg.seed);
    let noisy = if spec.jitter_degrees > 0.0 || spec.jitter_translation > 0.0 {
        let mesh_path = c
            .mesh
            .clone()
            .or_else(|| (!cfg.paths.mesh.as_os_str().is_empty()).then(|| cfg.paths.mesh.clone()))
            .ok_or_else(|| usage("rigid jitter re-renders the mesh; pass --mesh"))?;
        synthesize_mapset(&read_obj(&mesh_path)?, &clean.rig, &spec, cfg.rig.render_options())?
    } else {
        crate::render::perturb_mapset(&clean, &spec)?
    };
    write_mapset(&out, &noisy)?;
    write_json(&out.join("perturbation.json"), &spec)?;
    Ok(())
}

fn transform_records(t: &[crate::geometry::RigidTransform]) -> Vec<TransformRecord> {
    t.iter().map(TransformRecord::from).collect()
}

fn align(maps: &MapSet, cfg: &PipelineConfig) -> Result<(MapSet, Value)> {
    let sets = generate_points(maps);
    let alignment = align_rig(&sets, &cfg.icp.params(maps.rig.kappa()), cfg.icp.sweeps)?;
    for w in &alignment.warnings {
        tracing::warn!(event = "icp_warning", message = %w);
    }
    let report = json!({
        "transforms": transform_records(&alignment.transforms),
        "rms": alignment.rms,
        "warnings": alignment.warnings,
    });
    Ok((apply_alignment(maps, &alignment.transforms), report))
}

fn cmd_icp(c: &IcpCmd, cfg: &PipelineConfig) -> CliResult<()> {
    let input = required(&c.input, "in", &cfg.paths.input)?;
    let out = required(&c.out, "out", &cfg.paths.output)?;
    check_output(&out, &[&input])?;
    let maps = read_mapset(&input)?;
    let (aligned, report) = align(&maps, cfg)?;
    write_mapset(&out, &aligned)?;
    write_json(&out.join("transforms.json"), &report)?;
    Ok(())
}

fn cmd_fuse(c: &FuseCmd, cfg: &PipelineConfig) -> CliResult<()> {
    let input = required(&c.input, "in", &cfg.paths.input)?;
    let out = required(&c.out, "out", &cfg.paths.output)?;
    check_output(&out, &[&input])?;
    let maps = read_mapset(&input)?;
    let fused = fuse(&maps, &cfg.fusion)?;
    log_fusion_report(&fused.report);
    write_mapset(&out, &fused.maps)?;
    write_ply(&out.join("points.ply"), &fused.cloud)?;
    write_json(&out.join("report.json"), &fused.report)?;
    Ok(())
}

fn contours_from_masks(maps: &MapSet) -> Vec<ContourRecord> {
    maps.views
        .iter()
        .enumerate()
        .filter_map(|(v, view)| {
            let points = extract_silhouette_contour(&view.mask).ok()?;
            (points.len() >= MIN_CONTOUR_POINTS).then_some(ContourRecord { view_index: v, points })
        })
        .collect()
}

fn cmd_deform(c: &DeformCmd, cfg: &PipelineConfig) -> CliResult<()> {
    let mesh_path = required(&c.mesh, "mesh", &cfg.paths.mesh)?;
    let out = required(&c.out, "out", &cfg.paths.output)?;
    let contour_path = c
        .contours
        .clone()
        .or_else(|| (!cfg.paths.contours.as_os_str().is_empty()).then(|| cfg.paths.contours.clone()));
    let mut inputs: Vec<&Path> = vec![&mesh_path];
    if let Some(p) = &contour_path {
        inputs.push(p);
    }
    if let Some(p) = &c.maps {
        inputs.push(p);
    }
    check_output(&out, &inputs)?;
    let mesh = read_obj(&mesh_path)?;
    let maps = c.maps.as_deref().map(read_mapset).transpose()?;
    let rig: ViewRig = match &maps {
        Some(m) => m.rig.clone(),
        None => cfg.rig.build()?,
    };
    let constraints = match (&contour_path, &maps) {
        (Some(p), _) => ContourConstraintSet::read(p, rig)?,
        (None, Some(m)) => ContourConstraintSet::new(rig, contours_from_masks(m))?,
        (None, None) => return Err(usage("pass --contours or --maps")),
    };
    let result = deform_to_contours(&mesh, &constraints, &cfg.deform)?;
    for w in &result.warnings {
        tracing::warn!(event = "deform_warning", message = %w);
    }
    create_dir(&out)?;
    write_obj(&out.join("deformed.obj"), &result.mesh)?;
    write_json(
        &out.join("report.json"),
        &json!({
            "residual_before": result.residual_before,
            "residual_after": result.residual_after,
            "solver_iterations": result.solver_iterations,
            "warnings": result.warnings,
            "views": constraints.contours.len(),
        }),
    )?;
    Ok(())
}

fn metrics_json(record: &MetricsRecord, params: &MetricsParams) -> Value {
    let mut v = serde_json::to_value(record).expect("record serializes");
    v["parameters"] = serde_json::to_value(params).expect("params serialize");
    v
}

fn cmd_metrics(c: &MetricsCmd, cfg: &PipelineConfig) -> CliResult<()> {
    let recon = LoadedShape::read(&c.recon)?;
    let reference = LoadedShape::read(&c.reference)?;
    let maps = match (&c.recon_maps, &c.ref_maps) {
        (Some(a), Some(b)) => Some((read_mapset(a)?, read_mapset(b)?)),
        (None, None) => None,
        _ => return Err(usage("--recon-maps and --ref-maps go together")),
    };
    let record = evaluate(
        recon.shape(),
        reference.shape(),
        maps.as_ref().map(|(a, b)| (a, b)),
        &cfg.metrics,
    )?;
    let value = metrics_json(&record, &cfg.metrics);
    let text = serde_json::to_string_pretty(&value).expect("json serializes");
    println!("{text}");
    if let Some(p) = &c.out {
        write_json(p, &value)?;
    }
    Ok(())
}

/// Per-pixel comparison on the shared pixel grid; alignment changes the
/// rig, not the pixel lattice.
fn on_rig(m: &MapSet, rig: &ViewRig) -> MapSet {
    MapSet { rig: rig.clone(), views: m.views.clone() }
}

fn cmd_pipeline(c: &PipelineCmd, cfg: &PipelineConfig) -> CliResult<()> {
    let mesh_path = required(&c.mesh, "mesh", &cfg.paths.mesh)?;
    let out = required(&c.out, "out", &cfg.paths.output)?;
    check_output(&out, &[&mesh_path])?;
    let mesh = read_obj(&mesh_path)?;
    let rig = cfg.rig.build()?;
    let opts = cfg.rig.render_options();
    create_dir(&out)?;

    let clean = render_mapset(&mesh, &rig, opts)?;
    write_mapset(&out.join("clean"), &clean)?;
    let spec = cfg.perturb.spec(cfg.seed);
    let noisy = synthesize_mapset(&mesh, &rig, &spec, opts)?;
    write_mapset(&out.join("perturbed"), &noisy)?;
    tracing::info!(event = "render", views = rig.len(), foreground = clean.foreground_count());

    let (aligned, icp_report) = if cfg.icp.enabled {
        let (aligned, report) = align(&noisy, cfg)?;
        write_mapset(&out.join("aligned"), &aligned)?;
        write_json(&out.join("aligned").join("transforms.json"), &report)?;
        (aligned, report)
    } else {
        (noisy.clone(), Value::Null)
    };

    let fused = fuse(&aligned, &cfg.fusion)?;
    log_fusion_report(&fused.report);
    write_mapset(&out.join("fused"), &fused.maps)?;
    write_ply(&out.join("fused.ply"), &fused.cloud)?;
    write_json(&out.join("fusion_report.json"), &fused.report)?;
    let naive = concatenate(&generate_points(&aligned));
    write_ply(&out.join("naive.ply"), &naive)?;

    let reference = Shape::Mesh(&mesh);
    let fused_maps = on_rig(&fused.maps, &clean.rig);
    let naive_maps = on_rig(&aligned, &clean.rig);
    let fused_metrics = evaluate(Shape::Points(&fused.cloud), reference, Some((&fused_maps, &clean)), &cfg.metrics)?;
    let naive_metrics = evaluate(Shape::Points(&naive), reference, Some((&naive_maps, &clean)), &cfg.metrics)?;
    tracing::info!(
        event = "metrics",
        fused_chamfer = fused_metrics.chamfer,
        naive_chamfer = naive_metrics.chamfer,
    );

    let summary = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "mesh": mesh_path.file_name().map(|n| n.to_string_lossy().into_owned()),
        "config": cfg,
        "foreground_pixels": {
            "clean": clean.foreground_count(),
            "perturbed": noisy.foreground_count(),
            "fused": fused.maps.foreground_count(),
        },
        "icp": icp_report,
        "fusion": fused.report,
        "metrics": {
            "fused": metrics_json(&fused_metrics, &cfg.metrics),
            "naive": metrics_json(&naive_metrics, &cfg.metrics),
        },
    });
    write_json(&out.join("summary.json"), &summary)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    fn help(sub: &str) -> String {
        let mut cmd = Cli::command();
        cmd.build();
        cmd.find_subcommand_mut(sub).unwrap().render_long_help().to_string()
    }

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn help_defaults_match_the_code() {
        let f = FusionConfig::default();
        let r = PipelineConfig::default().rig;
        let m = MetricsParams::default();
        let d = crate::deform::DeformParams::default();
        for sub in ["fuse", "pipeline"] {
            let h = help(sub);
            for (flag, value) in [
                ("--w1", format!("{:?}", f.w1)),
                ("--w2", format!("{:?}", f.w2)),
                ("--w3", format!("{:?}", f.w3)),
                ("--w4", format!("{:?}", f.w4)),
                ("--iterations", f.outer_iterations.to_string()),
                ("--early-exit", f.early_exit.to_string()),
            ] {
                let start = h.find(flag).unwrap_or_else(|| panic!("{sub}: {flag} missing"));
                let tail = &h[start..];
                let end = tail[2..].find("--").map(|k| k + 2).unwrap_or(tail.len());
                assert!(tail[..end].contains(&format!("[default: {value}]")), "{sub} {flag}: {}", &tail[..end]);
            }
        }
        for sub in ["render", "pipeline"] {
            let h = help(sub);
            assert!(h.contains(&format!("[default: {}]", r.views)));
            assert!(h.contains(&format!("[default: {}]", r.width)));
        }
        let h = help("metrics");
        assert!(h.contains(&format!("[default: {}]", m.samples)));
        assert!(h.contains(&format!("[default: {}]", m.voxel_resolution)));
        let h = help("deform");
        assert!(h.contains(&format!("[default: {:?}]", d.laplacian_weight)));
        assert!(h.contains(&format!("[default: {:?}]", d.contour_weight)));
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["mvfuse", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["mvfuse", "fuse", "--w1", "abc"]), EXIT_USAGE);
        assert_eq!(run(["mvfuse", "--quiet", "fuse"]), EXIT_USAGE);
        assert_eq!(run(["mvfuse", "--help"]), EXIT_OK);
    }

    #[test]
    fn missing_input_exits_two() {
        let dir = tempfile::tempdir().unwrap();
        let code = run([
            "mvfuse".into(),
            "--quiet".into(),
            "metrics".into(),
            "--recon".into(),
            dir.path().join("nope.ply").into_os_string(),
            "--ref".into(),
            dir.path().join("nope.obj").into_os_string(),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn output_may_not_be_the_input() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().to_str().unwrap();
        assert_eq!(run(["mvfuse", "--quiet", "fuse", "--in", p, "--out", p]), EXIT_USAGE);
    }
}

//! Pipeline configuration: TOML file, then `MVFUSE_*` environment
//! variables, then command-line flags, in increasing precedence.
//!
//! Every leaf of the configuration has one environment variable named
//! `MVFUSE_` followed by its upper-cased path joined with `_`, for example
//! `MVFUSE_FUSION_W3` or `MVFUSE_RIG_WIDTH`. [`env_variables`] lists them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::deform::DeformParams;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::icp::{IcpParams, DEFAULT_SWEEPS};
use crate::metrics::MetricsParams;
use crate::render::{PerturbationSpec, RenderOptions};
use crate::views::ViewRig;

pub const ENV_PREFIX: &str = "MVFUSE";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigConfig {
    /// Number of icosahedron cameras used, taken in vertex order.
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub smooth_normals: bool,
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig { views: 12, width: 256, height: 256, smooth_normals: false }
    }
}

impl RigConfig {
    pub fn build(&self) -> Result<ViewRig> {
        if self.views == 0 || self.views > 12 {
            return Err(Error::InvalidArgument(format!("views must be in 1..=12, got {}", self.views)));
        }
        let mut rig = ViewRig::icosahedron(self.width, self.height)?;
        rig.cameras.truncate(self.views);
        Ok(rig)
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions { smooth_normals: self.smooth_normals }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpConfig {
    pub enabled: bool,
    pub max_iterations: usize,
    /// Pair rejection distance; `None` means four pixels.
    pub rejection_distance: Option<f64>,
    pub convergence: f64,
    /// Round-robin passes over the views.
    pub sweeps: usize,
}

impl Default for IcpConfig {
    fn default() -> Self {
        let p = IcpParams::for_kappa(1.0);
        IcpConfig {
            enabled: true,
            max_iterations: p.max_iterations,
            rejection_distance: None,
            convergence: p.convergence,
            sweeps: DEFAULT_SWEEPS,
        }
    }
}

impl IcpConfig {
    pub fn params(&self, kappa: f64) -> IcpParams {
        IcpParams {
            max_iterations: self.max_iterations,
            rejection_distance: self.rejection_distance.unwrap_or(4.0 * kappa),
            convergence: self.convergence,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    pub depth_offset: f64,
    pub view_bias: f64,
    pub depth_noise: f64,
    pub jitter_degrees: f64,
    pub jitter_translation: f64,
    pub normal_noise: f64,
}

impl PerturbConfig {
    pub fn spec(&self, seed: u64) -> PerturbationSpec {
        PerturbationSpec {
            depth_offset: self.depth_offset,
            view_bias: self.view_bias,
            depth_noise: self.depth_noise,
            jitter_degrees: self.jitter_degrees,
            jitter_translation: self.jitter_translation,
            normal_noise: self.normal_noise,
            seed,
        }
    }

    pub fn from_spec(s: &PerturbationSpec) -> Self {
        PerturbConfig {
            depth_offset: s.depth_offset,
            view_bias: s.view_bias,
            depth_noise: s.depth_noise,
            jitter_degrees: s.jitter_degrees,
            jitter_translation: s.jitter_translation,
            normal_noise: s.normal_noise,
        }
    }

    /// Applies `bias=0.02,noise=0.005`-style overrides.
    pub fn apply_overrides(&mut self, text: &str) -> Result<()> {
        let mut spec = self.spec(0);
        spec.parse_overrides(text)?;
        *self = Self::from_spec(&spec);
        Ok(())
    }
}

/// Input and output locations; an empty path means unset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub mesh: PathBuf,
    pub input: PathBuf,
    pub output: PathBuf,
    pub reference: PathBuf,
    pub contours: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub rig: RigConfig,
    pub fusion: FusionConfig,
    pub icp: IcpConfig,
    pub perturb: PerturbConfig,
    pub metrics: MetricsParams,
    pub deform: DeformParams,
    pub paths: PathsConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Checks weights and numeric ranges. Paths are checked by the commands
    /// that use them.
    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        self.icp.params(self.rig.build()?.kappa()).validate()?;
        self.perturb.spec(self.seed).validate()?;
        self.deform.validate()?;
        if self.metrics.samples == 0 || self.metrics.voxel_resolution < 2 {
            return Err(Error::InvalidArgument("metrics need samples >= 1 and voxel resolution >= 2".into()));
        }
        Ok(())
    }

    /// Overrides leaves from `MVFUSE_*` variables supplied by `lookup`.
    pub fn apply_env_with(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        let mut value = Value::try_from(&*self).expect("config serializes");
        let template = Value::try_from(leaf_template()).expect("config serializes");
        let mut changed = false;
        for (path, kind) in leaves(&template) {
            let name = env_name(&path);
            let Some(raw) = lookup(&name) else { continue };
            let parsed = parse_leaf(&raw, &kind).ok_or_else(|| {
                Error::InvalidArgument(format!("{name}={raw:?} is not a valid {}", kind.type_str()))
            })?;
            set_leaf(&mut value, &path, parsed);
            changed = true;
        }
        if changed {
            *self = value.try_into().map_err(|e| Error::InvalidArgument(format!("environment override: {e}")))?;
        }
        Ok(())
    }

    pub fn apply_env(&mut self) -> Result<()> {
        self.apply_env_with(|k| std::env::var(k).ok())
    }
}

/// A configuration with every optional leaf present, so the leaf walk sees
/// all of them.
fn leaf_template() -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.fusion.occlusion_threshold = Some(0.0);
    c.icp.rejection_distance = Some(0.0);
    c
}

fn leaves(v: &Value) -> Vec<(Vec<String>, Value)> {
    fn walk(v: &Value, prefix: &mut Vec<String>, out: &mut Vec<(Vec<String>, Value)>) {
        match v {
            Value::Table(t) => {
                for (k, child) in t {
                    prefix.push(k.clone());
                    walk(child, prefix, out);
                    prefix.pop();
                }
            }
            other => out.push((prefix.clone(), other.clone())),
        }
    }
    let mut out = Vec::new();
    walk(v, &mut Vec::new(), &mut out);
    out
}

fn env_name(path: &[String]) -> String {
    format!("{ENV_PREFIX}_{}", path.join("_").to_uppercase())
}

fn parse_leaf(raw: &str, kind: &Value) -> Option<Value> {
    let raw = raw.trim();
    Some(match kind {
        Value::Integer(_) => Value::Integer(raw.parse().ok()?),
        Value::Float(_) => Value::Float(raw.parse().ok()?),
        Value::Boolean(_) => Value::Boolean(raw.parse().ok()?),
        _ => Value::String(raw.to_string()),
    })
}

fn set_leaf(root: &mut Value, path: &[String], leaf: Value) {
    let mut cur = root;
    for key in &path[..path.len() - 1] {
        let table = cur.as_table_mut().expect("config sections are tables");
        cur = table.entry(key.clone()).or_insert_with(|| Value::Table(Default::default()));
    }
    cur.as_table_mut()
        .expect("config sections are tables")
        .insert(path[path.len() - 1].clone(), leaf);
}

/// Every supported environment variable, sorted.
pub fn env_variables() -> Vec<String> {
    let template = Value::try_from(leaf_template()).expect("config serializes");
    let mut names: Vec<String> = leaves(&template).iter().map(|(p, _)| env_name(p)).collect();
    names.sort();
    names
}

//! Experiment configuration: a versioned TOML document, validated before
//! any computation starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use shrinklsi_core::abp::SolverOptions;
use shrinklsi_core::entropy::MuOptions;
use shrinklsi_core::{AxisSpec, GridSpec, ManifoldModel, ParamAxis, QuadratureRule, StencilOrder, TestFamily};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub density: Option<DensityConfig>,
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub deficit: DeficitConfig,
    #[serde(default)]
    pub transport: TransportConfig,
    #[serde(default)]
    pub entropy: EntropyConfig,
    #[serde(default)]
    pub shrinker: ShrinkerConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
}

fn default_epsilons() -> Vec<f64> {
    vec![0.5, 0.1]
}

fn default_tau() -> f64 {
    1.0
}

fn default_seed() -> u64 {
    20240611
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Plane {
        n: usize,
        #[serde(default)]
        codim: usize,
    },
    /// `S^n(radius)`; the radius defaults to `sqrt(2n)`.
    Sphere {
        n: usize,
        #[serde(default)]
        radius: Option<f64>,
    },
    /// `S^k(sqrt(2k)) x R^(n-k)`.
    Cylinder { k: usize, n: usize },
    Circle { radius: f64 },
    Torus,
    /// Chart sampled on a tensor grid of parameters; `file` holds one row
    /// per sample with columns `x0..x{ambient_dim-1}`, axis 0 fastest.
    Tabulated {
        name: String,
        axes: Vec<TabulatedAxis>,
        ambient_dim: usize,
        file: PathBuf,
        #[serde(default = "default_fd_step")]
        fd_step_rel: f64,
    },
}

fn default_fd_step() -> f64 {
    1e-4
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabulatedAxis {
    pub lo: f64,
    pub hi: f64,
    #[serde(default)]
    pub periodic: bool,
    /// Samples along this axis in the chart table.
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Target spacing in ambient units (built-in models).
    #[serde(default)]
    pub spacing: Option<f64>,
    pub truncation_radius: f64,
    #[serde(default)]
    pub quadrature: QuadratureRule,
    /// Node counts per axis (tabulated models).
    #[serde(default)]
    pub nodes: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensityConfig {
    /// Smooth compactly supported bump, normalized to unit mass, times `scale`.
    Bump {
        center: Vec<f64>,
        width: f64,
        #[serde(default = "one")]
        scale: f64,
    },
    /// `exp(-|x|²/(2 variance))`, normalized to unit mass, times `scale`.
    Gaussian {
        variance: f64,
        #[serde(default = "one")]
        scale: f64,
    },
    /// `(4πτ)^(-n/2) e^(-|x|²/4τ)` as is, times `scale`.
    Canonical {
        #[serde(default = "one")]
        scale: f64,
    },
    /// Nodal values in the field CSV layout `p0..p{n-1},value`.
    File { path: PathBuf },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeficitConfig {
    pub stencil: StencilOrder,
    pub floor_rel: f64,
    /// `|∫ f dvol - 1|` above this needs `--auto-normalize`.
    pub mass_tol: f64,
}

impl Default for DeficitConfig {
    fn default() -> Self {
        Self { stencil: StencilOrder(6), floor_rel: 1e-14, mass_tol: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    pub samples: usize,
    /// Normal offsets are drawn with `|y| <= y_scale`.
    pub y_scale: f64,
    /// Sample nodes lie within this ambient radius.
    pub radius: f64,
    pub targets: usize,
    pub target_half_width: f64,
    pub stencil: StencilOrder,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self { samples: 1000, y_scale: 3.0, radius: 10.0, targets: 100, target_half_width: 3.0, stencil: StencilOrder::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntropyConfig {
    pub families: Vec<TestFamily>,
    pub search: MuOptions,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self { families: vec![TestFamily::AmbientLinear, TestFamily::ChartHarmonics { order: 2 }], search: MuOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShrinkerConfig {
    /// Radii for the polynomial growth fit; default eight equispaced radii
    /// up to the truncation radius.
    pub growth_radii: Option<Vec<f64>>,
}

impl Default for ShrinkerConfig {
    fn default() -> Self {
        Self { growth_radii: None }
    }
}

/// Thresholds behind every verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub shrinker_residual: f64,
    pub deficit_floor: f64,
    pub jensen_ceiling: f64,
    pub alpha_slack: f64,
    pub identity: f64,
    pub mass_ratio_slack: f64,
    pub min_in_u: usize,
    /// Probe recovery errors up to this multiple of the largest spacing count as recovered.
    pub probe_error_factor: f64,
    pub entropy_floor: f64,
    pub gap_floor: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            shrinker_residual: 1e-8,
            deficit_floor: 1e-6,
            jensen_ceiling: 1e-12,
            alpha_slack: 1e-3,
            identity: 1e-3,
            mass_ratio_slack: 1e-3,
            min_in_u: 500,
            probe_error_factor: 2.0,
            entropy_floor: 1e-6,
            gap_floor: 1e-6,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let cfg = cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Relative file references are taken relative to the config file.
    fn resolve_paths(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let ModelConfig::Tabulated { file, .. } = &mut self.model {
            fix(file);
        }
        if let Some(DensityConfig::File { path }) = &mut self.density {
            fix(path);
        }
        if let Some(out) = &mut self.output_dir {
            fix(out);
        }
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.epsilons.is_empty() || self.epsilons.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
            return bad("epsilons must be a non-empty list of positive numbers".into());
        }
        if !(self.grid.truncation_radius > 0.0) {
            return bad("grid.truncation_radius must be positive".into());
        }
        match (&self.model, self.grid.spacing, &self.grid.nodes) {
            (ModelConfig::Tabulated { axes, .. }, _, Some(nodes)) if nodes.len() == axes.len() => {}
            (ModelConfig::Tabulated { .. }, _, _) => return bad("tabulated models need grid.nodes with one count per axis".into()),
            (_, Some(h), None) if h > 0.0 => {}
            _ => return bad("built-in models need a positive grid.spacing and no grid.nodes".into()),
        }
        match &self.density {
            Some(DensityConfig::Bump { width, scale, .. }) if !(*width > 0.0) || !(*scale > 0.0) => {
                return bad("bump width and scale must be positive".into())
            }
            Some(DensityConfig::Gaussian { variance, scale }) if !(*variance > 0.0) || !(*scale > 0.0) => {
                return bad("gaussian variance and scale must be positive".into())
            }
            Some(DensityConfig::Canonical { scale }) if !(*scale > 0.0) => return bad("canonical scale must be positive".into()),
            _ => {}
        }
        if self.transport.samples == 0 || !(self.transport.y_scale >= 0.0) || !(self.transport.radius > 0.0) {
            return bad("transport.samples and transport.radius must be positive".into());
        }
        if !(self.deficit.mass_tol > 0.0) {
            return bad("deficit.mass_tol must be positive".into());
        }
        if let Some(r) = &self.shrinker.growth_radii {
            if r.len() < 3 {
                return bad("shrinker.growth_radii needs at least 3 radii".into());
            }
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<ManifoldModel, CliError> {
        let model = match &self.model {
            ModelConfig::Plane { n, codim } => ManifoldModel::plane_in(*n, *codim),
            ModelConfig::Sphere { n, radius: None } => ManifoldModel::sphere(*n),
            ModelConfig::Sphere { n, radius: Some(r) } => ManifoldModel::sphere_with_radius(*n, *r),
            ModelConfig::Cylinder { k, n } => ManifoldModel::cylinder(*k, *n),
            ModelConfig::Circle { radius } => ManifoldModel::circle(*radius),
            ModelConfig::Torus => ManifoldModel::shrinking_torus(),
            ModelConfig::Tabulated { name, axes, ambient_dim, file, fd_step_rel } => {
                let positions = read_chart_table(file, *ambient_dim)?;
                ManifoldModel::tabulated(
                    name.clone(),
                    axes.iter().map(|a| ParamAxis { lo: a.lo, hi: a.hi, periodic: a.periodic }).collect(),
                    axes.iter().map(|a| a.samples).collect(),
                    *ambient_dim,
                    positions,
                    *fd_step_rel,
                )
            }
        };
        model.map_err(|e| CliError::Config(format!("model: {e}")))
    }

    pub fn build_grid(&self, model: &ManifoldModel) -> Result<GridSpec, CliError> {
        let grid = match (&self.model, self.grid.spacing, &self.grid.nodes) {
            (ModelConfig::Tabulated { axes, .. }, _, Some(nodes)) => {
                let specs = axes
                    .iter()
                    .zip(nodes)
                    .map(|(a, &k)| if a.periodic { AxisSpec::periodic(a.lo, a.hi, k) } else { AxisSpec::bounded(a.lo, a.hi, k) })
                    .collect();
                GridSpec::new(specs, self.grid.truncation_radius, self.grid.quadrature)
            }
            (_, Some(h), _) => GridSpec::for_model(model, h, self.grid.truncation_radius).and_then(|g| g.with_rule(self.grid.quadrature)),
            _ => unreachable!("validated"),
        };
        grid.map_err(|e| CliError::Config(format!("grid: {e}")))
    }
}

fn read_chart_table(path: &Path, ambient_dim: usize) -> Result<Vec<f64>, CliError> {
    let err = |m: String| CliError::Config(format!("chart table {}: {m}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        if rec.len() != ambient_dim {
            return Err(err(format!("expected {ambient_dim} columns, found {}", rec.len())));
        }
        for s in rec.iter() {
            out.push(s.trim().parse::<f64>().map_err(|e| err(e.to_string()))?);
        }
    }
    Ok(out)
}

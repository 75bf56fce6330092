//! The persisted run: JSON record, verdicts and CSV sidecars.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use shrinklsi_core::abp::{DirichletDiagnostic, DivergenceEntry, GrowthEntry, UniquenessProbe};
use shrinklsi_core::io::fmt_f64;
use shrinklsi_core::lsi::DeficitReport;
use shrinklsi_core::GrowthCheck;

use crate::config::ExperimentConfig;
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = ">=")]
    AtLeast,
}

/// `value relation threshold`; recomputable from the three stored fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub check: String,
    pub value: f64,
    pub relation: Relation,
    pub threshold: f64,
    pub pass: bool,
}

impl Verdict {
    pub fn at_most(check: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self { check: check.into(), value, relation: Relation::AtMost, threshold, pass: value <= threshold }
    }

    pub fn at_least(check: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self { check: check.into(), value, relation: Relation::AtLeast, threshold, pass: value >= threshold }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShrinkerReport {
    pub model: String,
    pub n: usize,
    pub ambient_dim: usize,
    pub builtin_shrinker: bool,
    pub compact: bool,
    pub active_nodes: usize,
    /// `max |H + x^⊥/2|` over active nodes.
    pub max_residual: f64,
    /// `dvol`-weighted root mean square of `|H + x^⊥/2|`.
    pub rms_residual: f64,
    pub max_invariant_residual: f64,
    pub growth: GrowthCheck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityInfo {
    pub kind: String,
    /// `∫ f dvol` before any `--auto-normalize` rescaling.
    pub raw_mass: f64,
    pub auto_normalized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbpSummary {
    pub epsilon: f64,
    pub tau: f64,
    pub c: f64,
    pub alpha: f64,
    pub alpha_tau: f64,
    pub anchor_param: Vec<f64>,
    pub final_delta: f64,
    pub schedule_steps: usize,
    pub bound_violations: usize,
    pub w_sup: f64,
    pub source_mean: f64,
    pub source_sup: f64,
    pub peclet: f64,
    /// `|∫(τ|∇f_ε|²/f_ε - f_ε log f_ε + τ|H|²f_ε - τ|x^⊥/(2τ)+H|²f_ε) dvol - α|`
    pub identity_gap: f64,
    pub growth: Vec<GrowthEntry>,
    pub divergence: Vec<DivergenceEntry>,
    pub dirichlet: Option<DirichletDiagnostic>,
    pub uniqueness: Option<UniquenessProbe>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportSummary {
    pub epsilon: f64,
    pub spacing: f64,
    pub samples: usize,
    pub skipped: usize,
    pub in_u: usize,
    pub violations: usize,
    pub worst_ratio: f64,
    pub targets: usize,
    pub probes_interior: usize,
    /// Interior probes with error at most `probe_error_factor * spacing`.
    pub probes_recovered: usize,
    pub max_recovery_error: Option<f64>,
    pub mass_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySummary {
    pub family: String,
    pub basis_size: usize,
    pub mu_hat: f64,
    pub theta: Vec<f64>,
    pub gap: f64,
    pub normalization_error: f64,
    pub skipped: usize,
    pub evaluated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropySummary {
    pub lambda: f64,
    pub tail_estimate: f64,
    pub shrinker: bool,
    pub families: Vec<FamilySummary>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Reports {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shrinker: Option<ShrinkerReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub density: Option<DensityInfo>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deficit: Option<DeficitReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub abp: Vec<AbpSummary>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub transport: Vec<TransportSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entropy: Option<EntropySummary>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flags {
    pub seed: u64,
    pub auto_normalize: bool,
    pub emit_terms: bool,
    pub plot_data: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timestamps {
    pub started: String,
    pub finished: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool_version: String,
    pub subcommand: String,
    /// SHA-256 of the effective configuration serialized as JSON.
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub flags: Flags,
    pub timestamps: Timestamps,
    pub reports: Reports,
    pub verdicts: Vec<Verdict>,
    pub passed: bool,
    pub sidecars: Vec<String>,
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Output directory plus the list of sidecar files written into it.
pub struct Sidecars {
    dir: PathBuf,
    written: Mutex<Vec<String>>,
}

/// One CSV cell.
pub enum Cell {
    F(f64),
    U(usize),
    B(bool),
    S(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::F(v) => fmt_f64(*v),
            Cell::U(v) => v.to_string(),
            Cell::B(v) => v.to_string(),
            Cell::S(v) => v.clone(),
        }
    }
}

impl Sidecars {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("output dir {}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf(), written: Mutex::new(Vec::new()) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write<I>(&self, module: &'static str, name: &str, header: &[String], rows: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = Vec<Cell>>,
    {
        let io = |e: csv::Error| CliError::compute(module, format!("writing {name}: {e}"));
        let file = File::create(self.dir.join(name)).map_err(|e| CliError::compute(module, format!("writing {name}: {e}")))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        w.write_record(header).map_err(io)?;
        for row in rows {
            w.write_record(row.iter().map(Cell::render)).map_err(io)?;
        }
        w.flush().map_err(|e| CliError::compute(module, format!("writing {name}: {e}")))?;
        self.written.lock().unwrap().push(name.to_string());
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        let mut v = self.written.lock().unwrap().clone();
        v.sort();
        v
    }
}

pub fn header(fixed: &[&str]) -> Vec<String> {
    fixed.iter().map(|s| s.to_string()).collect()
}

/// `prefix0..prefix{k-1}`
pub fn indexed(prefix: &str, k: usize) -> Vec<String> {
    (0..k).map(|i| format!("{prefix}{i}")).collect()
}

pub fn write_record(dir: &Path, record: &RunRecord) -> Result<PathBuf, CliError> {
    let path = dir.join("run_record.json");
    let file = File::create(&path).map_err(|e| CliError::compute("cli_reporting", format!("{}: {e}", path.display())))?;
    serde_json::to_writer_pretty(BufWriter::new(file), record).map_err(|e| CliError::compute("cli_reporting", e))?;
    Ok(path)
}

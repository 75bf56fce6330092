//! `shrinklsi`: runs the shrinker, log-Sobolev, ABP, transport and entropy
//! pipelines from a TOML config and writes a JSON run record plus CSV sidecars.
//!
//! Exit codes: 0 all verdicts pass, 1 some verdict fails, 2 config error,
//! 3 compute error.

mod config;
mod error;
mod pipeline;
mod record;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser};

use config::ExperimentConfig;
use error::CliError;
use pipeline::{Context, Subcommand};
use record::{Flags, RunRecord, Sidecars, Timestamps};

#[derive(Parser)]
#[command(name = "shrinklsi", version, about = "Log-Sobolev deficits, ABP solves and entropy on self-shrinkers")]
enum Cli {
    /// Residual of H + x^perp/2 over the mesh and polynomial growth fits.
    VerifyShrinker(Common),
    /// Log-Sobolev terms and deficits of the configured density.
    LsiDeficit(Common),
    /// Vanishing-discount solve for every epsilon.
    SolveAbp(Common),
    /// Solve, then Jacobian samples, surjectivity probes and the mass ratio.
    CertifyTransport(Common),
    /// Entropy and mu estimates over the configured test families.
    Entropy(Common),
    /// Every module in sequence, sharing the solves.
    FullPipeline(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed for transport samples and probe targets; overrides the config.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Per-node deficit integrands (`deficit_terms.csv`) and a term table on stdout.
    #[arg(long)]
    emit_terms: bool,
    /// Rescale a density whose mass is not 1 instead of rejecting it.
    #[arg(long)]
    auto_normalize: bool,
    /// Nodal fields as CSV for external plotting.
    #[arg(long)]
    plot_data: bool,
}

impl Cli {
    fn split(self) -> (Subcommand, Common) {
        match self {
            Cli::VerifyShrinker(c) => (Subcommand::VerifyShrinker, c),
            Cli::LsiDeficit(c) => (Subcommand::LsiDeficit, c),
            Cli::SolveAbp(c) => (Subcommand::SolveAbp, c),
            Cli::CertifyTransport(c) => (Subcommand::CertifyTransport, c),
            Cli::Entropy(c) => (Subcommand::Entropy, c),
            Cli::FullPipeline(c) => (Subcommand::FullPipeline, c),
        }
    }
}

fn execute(cmd: Subcommand, args: Common) -> Result<RunRecord, CliError> {
    let started = record::now();
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out_dir = args.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("shrinklsi-out"));
    let model = cfg.build_model()?;
    let grid = cfg.build_grid(&model)?;
    let mesh = shrinklsi_core::Mesh::new(model, grid).map_err(|e| CliError::Config(format!("mesh: {e}")))?;
    let sidecars = Sidecars::new(&out_dir)?;
    let flags = Flags { seed: cfg.seed, auto_normalize: args.auto_normalize, emit_terms: args.emit_terms, plot_data: args.plot_data };
    let ctx = Context { cfg: &cfg, mesh, flags: flags.clone(), out: &sidecars };
    let outcome = pipeline::run(cmd, &ctx)?;
    let passed = outcome.verdicts.iter().all(|v| v.pass);
    let mut record = RunRecord {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        subcommand: cmd.name().to_string(),
        config_hash: record::config_hash(&cfg),
        config: cfg.clone(),
        flags,
        timestamps: Timestamps { started, finished: String::new() },
        reports: outcome.reports,
        verdicts: outcome.verdicts,
        passed,
        sidecars: sidecars.names(),
    };
    record.timestamps.finished = record::now();
    let path = record::write_record(sidecars.dir(), &record)?;
    for v in &record.verdicts {
        let rel = match v.relation {
            record::Relation::AtMost => "<=",
            record::Relation::AtLeast => ">=",
        };
        println!("{} {} = {:.6e} {rel} {:.6e}", if v.pass { "PASS" } else { "FAIL" }, v.check, v.value, v.threshold);
    }
    for note in &record.reports.notes {
        println!("note: {note}");
    }
    println!("{}: {} ({})", cmd.name(), if passed { "pass" } else { "fail" }, path.display());
    Ok(record)
}

fn main() -> ExitCode {
    let (cmd, args) = Cli::parse().split();
    match execute(cmd, args) {
        Ok(r) if r.passed => ExitCode::SUCCESS,
        Ok(_) => ExitCode::from(1),
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

//! Module pipelines behind each subcommand.

use rayon::prelude::*;

use shrinklsi_core::abp::{solve, ErgodicSolution, PerturbedDensity, SourceTerm};
use shrinklsi_core::entropy::{entropy, mu_estimate};
use shrinklsi_core::io::read_field_csv;
use shrinklsi_core::lsi::{consistency_check, deficit, DeficitOptions, DeficitReport};
use shrinklsi_core::measure::{alpha_tau, bump, growth_diagnostic, integrate, normalize, CanonicalDensity, Weight};
use shrinklsi_core::stencil::partials;
use shrinklsi_core::transport::{certify, random_samples, random_targets, TransportCertificate, TransportInput};
use shrinklsi_core::{DiscreteField, Error, Mesh};

use crate::config::{DensityConfig, ExperimentConfig};
use crate::error::CliError;
use crate::record::{
    header, indexed, AbpSummary, Cell, DensityInfo, EntropySummary, FamilySummary, Flags, Reports, ShrinkerReport, Sidecars,
    TransportSummary, Verdict,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    VerifyShrinker,
    LsiDeficit,
    SolveAbp,
    CertifyTransport,
    Entropy,
    FullPipeline,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Self::VerifyShrinker => "verify-shrinker",
            Self::LsiDeficit => "lsi-deficit",
            Self::SolveAbp => "solve-abp",
            Self::CertifyTransport => "certify-transport",
            Self::Entropy => "entropy",
            Self::FullPipeline => "full-pipeline",
        }
    }
}

pub struct Context<'a> {
    pub cfg: &'a ExperimentConfig,
    pub mesh: Mesh,
    pub flags: Flags,
    pub out: &'a Sidecars,
}

/// Output of a pipeline before it is wrapped into a `RunRecord`.
#[derive(Default)]
pub struct Outcome {
    pub reports: Reports,
    pub verdicts: Vec<Verdict>,
}

/// Everything downstream checks need from one solved case.
struct Solved {
    density: PerturbedDensity,
    source: SourceTerm,
    sol: ErgodicSolution,
}

pub fn run(cmd: Subcommand, ctx: &Context) -> Result<Outcome, CliError> {
    let mut out = Outcome::default();
    if cmd == Subcommand::CertifyTransport && ctx.cfg.tau != 1.0 {
        return Err(CliError::Config(format!("certify-transport runs at tau = 1, config has tau = {}", ctx.cfg.tau)));
    }
    let needs_density = matches!(
        cmd,
        Subcommand::LsiDeficit | Subcommand::SolveAbp | Subcommand::CertifyTransport | Subcommand::FullPipeline
    );
    let density = if needs_density { Some(load_density(ctx)?) } else { None };

    if matches!(cmd, Subcommand::VerifyShrinker | Subcommand::FullPipeline) {
        verify_shrinker(ctx, &mut out)?;
    }
    if let Some((f, info)) = &density {
        out.reports.density = Some(info.clone());
        if matches!(cmd, Subcommand::LsiDeficit | Subcommand::FullPipeline) {
            lsi_deficit(ctx, f, &mut out)?;
        }
        if matches!(cmd, Subcommand::SolveAbp | Subcommand::CertifyTransport | Subcommand::FullPipeline) {
            let solved = solve_all(ctx, f)?;
            if cmd != Subcommand::CertifyTransport {
                report_abp(ctx, &solved, &mut out)?;
            }
            if cmd == Subcommand::CertifyTransport || ctx.cfg.tau == 1.0 {
                certify_all(ctx, &solved, &mut out)?;
            } else {
                out.reports.notes.push(format!("transport certificate skipped: it is defined at tau = 1, config has tau = {}", ctx.cfg.tau));
            }
        }
    }
    if matches!(cmd, Subcommand::Entropy | Subcommand::FullPipeline) {
        entropy_report(ctx, &mut out)?;
    }
    Ok(out)
}

fn param_cells(mesh: &Mesh, node: usize) -> Vec<Cell> {
    mesh.param(node).into_iter().map(Cell::F).collect()
}

fn with_params(mesh: &Mesh, rest: &[&str]) -> Vec<String> {
    let mut h = indexed("p", mesh.dim());
    h.extend(rest.iter().map(|s| s.to_string()));
    h
}

fn verify_shrinker(ctx: &Context, out: &mut Outcome) -> Result<(), CliError> {
    const MODULE: &str = "geometry";
    let mesh = &ctx.mesh;
    let model = mesh.model();
    let residual: Vec<f64> = (0..mesh.len()).map(|i| mesh.try_frame(i).map_or(0.0, |fr| fr.shrinker_vector().norm())).collect();
    let (mut max, mut sq, mut vol, mut inv) = (0.0f64, 0.0, 0.0, 0.0f64);
    for i in mesh.active_nodes() {
        max = max.max(residual[i]);
        sq += mesh.weight(i) * residual[i] * residual[i];
        vol += mesh.weight(i);
        inv = inv.max(mesh.frame(i).invariant_residual());
    }
    let r = mesh.grid().truncation_radius;
    let radii = ctx.cfg.shrinker.growth_radii.clone().unwrap_or_else(|| (1..=8).map(|k| r * k as f64 / 8.0).collect());
    let growth = growth_diagnostic(mesh, &radii).map_err(|e| CliError::compute(MODULE, e))?;
    let report = ShrinkerReport {
        model: model.name().to_string(),
        n: model.n(),
        ambient_dim: model.ambient_dim(),
        builtin_shrinker: model.is_builtin_shrinker(),
        compact: model.is_compact(),
        active_nodes: mesh.active_count(),
        max_residual: max,
        rms_residual: if vol > 0.0 { (sq / vol).sqrt() } else { 0.0 },
        max_invariant_residual: inv,
        growth,
    };
    out.verdicts.push(Verdict::at_most("shrinker.max_residual", report.max_residual, ctx.cfg.tolerances.shrinker_residual));
    if ctx.flags.plot_data {
        let rows = mesh.active_nodes().map(|i| {
            let mut row = param_cells(mesh, i);
            row.extend(mesh.frame(i).position.iter().map(|&x| Cell::F(x)));
            row.push(Cell::F(residual[i]));
            row
        });
        let mut h = indexed("p", mesh.dim());
        h.extend(indexed("x", model.ambient_dim()));
        h.push("residual".into());
        ctx.out.write(MODULE, "shrinker_residual.csv", &h, rows)?;
    }
    out.reports.shrinker = Some(report);
    Ok(())
}

fn load_density(ctx: &Context) -> Result<(DiscreteField, DensityInfo), CliError> {
    let mesh = &ctx.mesh;
    let spec = ctx.cfg.density.as_ref().ok_or_else(|| CliError::Config("this subcommand needs a [density] table".into()))?;
    let cfg_err = |e: Error| CliError::Config(format!("density: {e}"));
    let unit = |f: DiscreteField| normalize(mesh, &f, Weight::Volume).map_err(cfg_err);
    let (kind, f) = match spec {
        DensityConfig::Bump { center, width, scale } => {
            if center.len() != mesh.model().ambient_dim() {
                return Err(CliError::Config(format!(
                    "bump center has {} coordinates, ambient dimension is {}",
                    center.len(),
                    mesh.model().ambient_dim()
                )));
            }
            ("bump", unit(bump(mesh, center, *width))?.scaled(mesh, *scale))
        }
        DensityConfig::Gaussian { variance, scale } => {
            let g = mesh.field_from_fn(|fr| (-fr.position.norm_squared() / (2.0 * variance)).exp());
            ("gaussian", unit(g)?.scaled(mesh, *scale))
        }
        DensityConfig::Canonical { scale } => {
            ("canonical", CanonicalDensity::new(mesh, ctx.cfg.tau).map_err(cfg_err)?.values.scaled(mesh, *scale))
        }
        DensityConfig::File { path } => {
            let file = std::fs::File::open(path).map_err(|e| CliError::Config(format!("density file {}: {e}", path.display())))?;
            ("file", read_field_csv(mesh, file).map_err(cfg_err)?)
        }
    };
    let min = f.min_active(mesh);
    if !(min >= 0.0) {
        return Err(CliError::Config(format!("density has negative values (min {min:e})")));
    }
    let raw_mass = integrate(mesh, &f).map_err(cfg_err)?;
    let off = (raw_mass - 1.0).abs() > ctx.cfg.deficit.mass_tol;
    let f = match (off, ctx.flags.auto_normalize) {
        (false, _) => f,
        (true, true) => unit(f)?,
        (true, false) => {
            return Err(CliError::Config(format!(
                "density has dvol-mass {raw_mass:.12e}, not 1 within {:e}; pass --auto-normalize to rescale it",
                ctx.cfg.deficit.mass_tol
            )))
        }
    };
    Ok((f, DensityInfo { kind: kind.into(), raw_mass, auto_normalized: off }))
}

fn deficit_options(ctx: &Context) -> DeficitOptions {
    let d = &ctx.cfg.deficit;
    DeficitOptions { stencil: d.stencil, mass_tol: d.mass_tol, floor_rel: d.floor_rel }
}

fn lsi_deficit(ctx: &Context, f: &DiscreteField, out: &mut Outcome) -> Result<(), CliError> {
    const MODULE: &str = "lsi_functional";
    let mesh = &ctx.mesh;
    let opts = deficit_options(ctx);
    let r = deficit(mesh, f, ctx.cfg.tau, &opts).map_err(|e| CliError::compute(MODULE, e))?;
    let tol = &ctx.cfg.tolerances;
    if mesh.model().is_builtin_shrinker() {
        out.verdicts.push(Verdict::at_least("lsi.deficit", r.deficit, -tol.deficit_floor));
    } else {
        out.verdicts.push(Verdict::at_least("lsi.corrected_deficit", r.corrected_deficit, -tol.deficit_floor));
        out.verdicts.push(Verdict::at_most("lsi.jensen_correction", r.jensen_correction, tol.jensen_ceiling));
    }
    if ctx.flags.emit_terms {
        emit_terms(ctx, f, &r, &opts)?;
    }
    out.reports.deficit = Some(r);
    Ok(())
}

/// Per-node integrands whose weighted sums are the report's integrals.
fn emit_terms(ctx: &Context, f: &DiscreteField, r: &DeficitReport, opts: &DeficitOptions) -> Result<(), CliError> {
    let mesh = &ctx.mesh;
    let tau = ctx.cfg.tau;
    let floor = opts.floor_rel * f.max();
    let rows = mesh.active_nodes().map(|i| {
        let v = f.values[i];
        let fr = mesh.frame(i);
        let fisher = if v > floor {
            partials(mesh, &f.values, i, opts.stencil).map_or(0.0, |(d, _)| fr.norm_sq_covector(&d) / v)
        } else {
            0.0
        };
        let ent = if v > 0.0 { v * v.ln() } else { 0.0 };
        let mut row = param_cells(mesh, i);
        row.extend([
            Cell::F(mesh.weight(i)),
            Cell::F(v),
            Cell::F(fisher),
            Cell::F(ent),
            Cell::F(fr.mean_curvature.norm_squared() * v),
            Cell::F(tau * fr.shrinker_vector_tau(tau).norm_squared() * v),
        ]);
        row
    });
    let h = with_params(mesh, &["weight", "f", "fisher", "entropy", "curvature", "shrinker_defect"]);
    ctx.out.write("lsi_functional", "deficit_terms.csv", &h, rows)?;
    println!("deficit terms (tau = {tau}):");
    for (name, v) in [
        ("mass", r.mass),
        ("dirichlet  int |grad f|^2/f", r.dirichlet),
        ("entropy    int f log f", r.entropy),
        ("curvature  int |H|^2 f", r.curvature),
        ("shrinker   int tau|x^perp/2tau + H|^2 f", r.shrinker_defect),
        ("jensen     log int e^(tau|..|^2) f", r.jensen),
        ("constant", r.constant),
        ("deficit", r.deficit),
        ("corrected deficit", r.corrected_deficit),
    ] {
        println!("  {name:<40} {v:.10e}");
    }
    Ok(())
}

fn eps_tag(eps: f64) -> String {
    format!("eps{eps}")
}

fn solve_all(ctx: &Context, f: &DiscreteField) -> Result<Vec<Solved>, CliError> {
    ctx.cfg
        .epsilons
        .par_iter()
        .map(|&eps| {
            let (density, source, sol) =
                solve(&ctx.mesh, f, eps, ctx.cfg.tau, &ctx.cfg.solver).map_err(|e| CliError::compute("abp_solver", format!("epsilon {eps}: {e}")))?;
            Ok(Solved { density, source, sol })
        })
        .collect()
}

fn report_abp(ctx: &Context, solved: &[Solved], out: &mut Outcome) -> Result<(), CliError> {
    const MODULE: &str = "abp_solver";
    let mesh = &ctx.mesh;
    let tol = &ctx.cfg.tolerances;
    let summaries: Vec<AbpSummary> = solved
        .par_iter()
        .map(|s| {
            let eps = s.density.epsilon;
            let tag = eps_tag(eps);
            let opts = DeficitOptions { mass_tol: 1e-6, ..deficit_options(ctx) };
            let gap = deficit(mesh, &s.density.values, s.sol.tau, &opts)
                .and_then(|r| consistency_check(&r, s.sol.alpha, s.sol.tau))
                .map_err(|e| CliError::compute("lsi_functional", format!("epsilon {eps}: {e}")))?;
            let trace = s.sol.trace.iter().map(|t| {
                vec![Cell::F(t.delta), Cell::F(t.scaled_anchor), Cell::F(t.sup_norm), Cell::F(t.bound), Cell::B(t.bound_ok)]
            });
            ctx.out.write(MODULE, &format!("abp_trace_{tag}.csv"), &header(&["delta", "scaled_anchor", "sup_norm", "bound", "bound_ok"]), trace)?;
            let div = s.sol.divergence.iter().map(|d| vec![Cell::F(d.radius), Cell::F(d.flux), Cell::F(d.energy)]);
            ctx.out.write(MODULE, &format!("abp_divergence_{tag}.csv"), &header(&["radius", "flux", "energy"]), div)?;
            if ctx.flags.plot_data {
                let rows = mesh.active_nodes().map(|i| {
                    let mut row = param_cells(mesh, i);
                    row.extend([
                        Cell::F(s.density.values.values[i]),
                        Cell::F(s.source.values.values[i]),
                        Cell::F(s.sol.w.values[i]),
                        Cell::F(s.sol.u.values[i]),
                    ]);
                    row
                });
                ctx.out.write(MODULE, &format!("abp_fields_{tag}.csv"), &with_params(mesh, &["f_eps", "source", "w", "u"]), rows)?;
            }
            Ok(AbpSummary {
                epsilon: eps,
                tau: s.sol.tau,
                c: s.sol.c,
                alpha: s.sol.alpha,
                alpha_tau: s.sol.alpha_tau,
                anchor_param: mesh.param(s.sol.anchor),
                final_delta: s.sol.trace.last().map_or(f64::NAN, |t| t.delta),
                schedule_steps: s.sol.trace.len(),
                bound_violations: s.sol.bound_violations(),
                w_sup: s.sol.w.sup_norm(),
                source_mean: s.sol.source_mean,
                source_sup: s.sol.source_sup,
                peclet: s.sol.peclet,
                identity_gap: gap,
                growth: s.sol.growth.clone(),
                divergence: s.sol.divergence.clone(),
                dirichlet: s.sol.dirichlet.clone(),
                uniqueness: s.sol.uniqueness.clone(),
            })
        })
        .collect::<Result<_, CliError>>()?;
    let a0 = alpha_tau(mesh.model().n(), ctx.cfg.tau);
    for s in &summaries {
        let tag = eps_tag(s.epsilon);
        out.verdicts.push(Verdict::at_least(format!("abp.{tag}.alpha"), s.alpha, a0 - tol.alpha_slack));
        if let Some(d) = &s.dirichlet {
            out.verdicts.push(Verdict::at_least(format!("abp.{tag}.dirichlet_alpha"), d.alpha, a0 - tol.alpha_slack));
        }
        out.verdicts.push(Verdict::at_most(format!("abp.{tag}.identity_gap"), s.identity_gap, tol.identity));
        out.verdicts.push(Verdict::at_most(format!("abp.{tag}.bound_violations"), s.bound_violations as f64, 0.0));
        let invalid = s.growth.iter().filter(|g| !g.valid).count();
        out.verdicts.push(Verdict::at_most(format!("abp.{tag}.invalid_growth_slopes"), invalid as f64, 0.0));
    }
    out.reports.abp = summaries;
    Ok(())
}

fn certify_all(ctx: &Context, solved: &[Solved], out: &mut Outcome) -> Result<(), CliError> {
    const MODULE: &str = "transport_certificate";
    let mesh = &ctx.mesh;
    let t = &ctx.cfg.transport;
    let tol = &ctx.cfg.tolerances;
    let seed = ctx.flags.seed;
    let spacing = mesh.grid().max_spacing();
    let samples = random_samples(mesh, t.samples, t.y_scale, t.radius, seed);
    let targets = random_targets(mesh.model().ambient_dim(), t.targets, t.target_half_width, seed.wrapping_add(1));
    let certs: Vec<(f64, TransportCertificate)> = solved
        .iter()
        .map(|s| {
            let input = TransportInput { density: &s.density.values, w: &s.sol.w, alpha: s.sol.alpha, stencil: t.stencil };
            certify(mesh, &input, &samples, &targets, spacing)
                .map(|c| (s.density.epsilon, c))
                .map_err(|e| CliError::compute(MODULE, format!("epsilon {}: {e}", s.density.epsilon)))
        })
        .collect::<Result<_, _>>()?;
    let ambient = mesh.model().ambient_dim();
    for (eps, cert) in &certs {
        let tag = eps_tag(*eps);
        let rows = cert.samples.iter().map(|s| {
            let mut row = vec![Cell::U(s.node)];
            row.extend(s.param.iter().map(|&p| Cell::F(p)));
            row.extend(s.y.iter().map(|&y| Cell::F(y)));
            row.extend([
                Cell::B(s.in_u),
                Cell::F(s.min_eigenvalue),
                Cell::F(s.det),
                Cell::F(s.bound),
                Cell::F(s.pde_residual),
                Cell::B(s.violation),
            ]);
            row
        });
        let mut h = vec!["node".to_string()];
        h.extend(indexed("p", mesh.dim()));
        h.extend(indexed("y", ambient));
        h.extend(header(&["in_u", "min_eigenvalue", "det", "bound", "pde_residual", "violation"]));
        ctx.out.write(MODULE, &format!("transport_samples_{tag}.csv"), &h, rows)?;

        let probes = cert.probes.iter().map(|p| {
            let mut row: Vec<Cell> = p.target.iter().map(|&x| Cell::F(x)).collect();
            if p.interior {
                row.extend(p.param.iter().map(|&x| Cell::F(x)));
                row.extend(p.minimizer.iter().map(|&x| Cell::F(x)));
            } else {
                row.extend((0..mesh.dim() + ambient).map(|_| Cell::S(String::new())));
            }
            row.extend([Cell::F(p.recovery_error), Cell::B(p.hessian_psd), Cell::B(p.interior)]);
            row
        });
        let mut h = indexed("target", ambient);
        h.extend(indexed("p", mesh.dim()));
        h.extend(indexed("minimizer", ambient));
        h.extend(header(&["recovery_error", "hessian_psd", "interior"]));
        ctx.out.write(MODULE, &format!("transport_probes_{tag}.csv"), &h, probes)?;

        let limit = tol.probe_error_factor * spacing;
        let recovered = cert.probes.iter().filter(|p| p.interior && p.recovery_error <= limit).count();
        let max_err = cert.probes.iter().filter(|p| p.interior).map(|p| p.recovery_error).fold(None, |m: Option<f64>, e| Some(m.map_or(e, |m| m.max(e))));
        let summary = TransportSummary {
            epsilon: *eps,
            spacing,
            samples: cert.samples.len() + cert.skipped,
            skipped: cert.skipped,
            in_u: cert.in_u,
            violations: cert.violations,
            worst_ratio: cert.worst_ratio,
            targets: cert.probes.len(),
            probes_interior: cert.probes_interior,
            probes_recovered: recovered,
            max_recovery_error: max_err,
            mass_ratio: cert.mass_ratio,
        };
        out.verdicts.push(Verdict::at_most(format!("transport.{tag}.violations"), summary.violations as f64, 0.0));
        out.verdicts.push(Verdict::at_least(format!("transport.{tag}.in_u"), summary.in_u as f64, tol.min_in_u as f64));
        out.verdicts.push(Verdict::at_most(
            format!("transport.{tag}.unrecovered_probes"),
            (summary.targets - summary.probes_recovered) as f64,
            0.0,
        ));
        out.verdicts.push(Verdict::at_least(format!("transport.{tag}.mass_ratio"), summary.mass_ratio, 1.0 - tol.mass_ratio_slack));
        out.reports.transport.push(summary);
    }
    Ok(())
}

fn entropy_report(ctx: &Context, out: &mut Outcome) -> Result<(), CliError> {
    const MODULE: &str = "entropy";
    let mesh = &ctx.mesh;
    let tol = &ctx.cfg.tolerances;
    let ent = entropy(mesh);
    if ent.shrinker {
        out.verdicts.push(Verdict::at_least("entropy.lambda", ent.lambda, 1.0 - tol.entropy_floor));
    }
    let cfg = &ctx.cfg.entropy;
    let reports = cfg
        .families
        .iter()
        .map(|fam| mu_estimate(mesh, fam, &cfg.search).map_err(|e| CliError::compute(MODULE, e)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut families = Vec::new();
    for (k, r) in reports.into_iter().enumerate() {
        let rows = r.landscape.iter().map(|p| {
            vec![Cell::U(p.axis), Cell::F(p.t), p.value.map_or(Cell::S(String::new()), Cell::F)]
        });
        ctx.out.write(MODULE, &format!("entropy_landscape_{k}.csv"), &header(&["axis", "t", "value"]), rows)?;
        out.verdicts.push(Verdict::at_least(format!("entropy.family{k}.gap"), r.gap, -tol.gap_floor));
        families.push(FamilySummary {
            family: r.family,
            basis_size: r.basis_size,
            mu_hat: r.mu_hat,
            theta: r.theta,
            gap: r.gap,
            normalization_error: r.normalization_error,
            skipped: r.skipped,
            evaluated: r.landscape.len(),
        });
    }
    out.reports.entropy = Some(EntropySummary { lambda: ent.lambda, tail_estimate: ent.tail_estimate, shrinker: ent.shrinker, families });
    Ok(())
}

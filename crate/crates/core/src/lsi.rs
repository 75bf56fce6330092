//! Log-Sobolev functionals of a density on a sampled submanifold and their
//! signed deficits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DiscreteField, Mesh};
use crate::measure::{alpha_tau, gaussian_density, sum_weighted};
use crate::stencil::{partials, StencilOrder};

/// Options shared by the deficit evaluators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeficitOptions {
    pub stencil: StencilOrder,
    /// `|∫ f dvol - 1|` above this is rejected.
    pub mass_tol: f64,
    /// Nodes with `f <= floor_rel * max f` are left out of the Dirichlet term.
    pub floor_rel: f64,
}

impl Default for DeficitOptions {
    fn default() -> Self {
        Self { stencil: StencilOrder::default(), mass_tol: 1e-8, floor_rel: 1e-14 }
    }
}

/// Every integral entering the log-Sobolev inequalities for `f`, and the
/// deficits assembled from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeficitReport {
    pub n: usize,
    pub tau: f64,
    pub mass: f64,
    /// `∫ |∇f|²/f dvol`
    pub dirichlet: f64,
    /// `∫ f log f dvol`
    pub entropy: f64,
    /// `∫ |H|² f dvol`
    pub curvature: f64,
    /// `∫ τ |x^⊥/(2τ) + H|² f dvol`
    pub shrinker_defect: f64,
    /// `log ∫ e^{τ |x^⊥/(2τ) + H|²} f dvol`
    pub jensen: f64,
    /// `n + (n/2) log(4πτ)`
    pub constant: f64,
    /// `τ dirichlet - entropy + τ curvature - constant`
    pub deficit: f64,
    /// `deficit - shrinker_defect + jensen`
    pub corrected_deficit: f64,
    /// `shrinker_defect - jensen`, never positive.
    pub jensen_correction: f64,
    /// Gaussian form of the deficit for `φ = f / γ` (only at `τ = 1`).
    pub gaussian_form: Option<f64>,
    /// Nodes whose gradient needed a one-sided stencil.
    pub one_sided_nodes: usize,
}

fn check_density(mesh: &Mesh, f: &DiscreteField, mass_tol: Option<f64>) -> Result<f64> {
    mesh.check_field(f)?;
    let max = f.max().max(0.0);
    let min = f.min_active(mesh);
    if min < -1e-14 * max.max(1e-300) || !min.is_finite() || !max.is_finite() {
        return Err(Error::NegativeValues { min });
    }
    let mass = sum_weighted(mesh.weights(), &f.values);
    if let Some(tol) = mass_tol {
        if !((mass - 1.0).abs() <= tol) {
            return Err(Error::NotNormalized { mass });
        }
    }
    Ok(mass)
}

/// `(∫ |∇f|²/f w dvol, ∫ f log f w dvol, one-sided count)` for a node weight `w`.
pub(crate) fn fisher_and_entropy(mesh: &Mesh, f: &[f64], extra: &[f64], opts: &DeficitOptions) -> (f64, f64, usize) {
    let floor = opts.floor_rel * f.iter().copied().fold(0.0, f64::max);
    let mut fisher = 0.0;
    let mut ent = 0.0;
    let mut one_sided = 0;
    for i in mesh.active_nodes() {
        let v = f[i];
        if v <= 0.0 {
            continue;
        }
        let w = mesh.weight(i) * extra[i];
        ent += w * v * v.ln();
        if v > floor {
            if let Some((d, os)) = partials(mesh, f, i, opts.stencil) {
                fisher += w * mesh.frame(i).norm_sq_covector(&d) / v;
                one_sided += os as usize;
            }
        }
    }
    (fisher, ent, one_sided)
}

/// Deficit report for a density `f` (unit `dvol`-mass) at scale `τ`.
pub fn deficit(mesh: &Mesh, f: &DiscreteField, tau: f64, opts: &DeficitOptions) -> Result<DeficitReport> {
    if !(tau > 0.0) {
        return Err(Error::MismatchedInputs(format!("tau must be positive, got {tau}")));
    }
    let mass = check_density(mesh, f, Some(opts.mass_tol))?;
    let n = mesh.model().n();
    let ones = vec![1.0; mesh.len()];
    let (dirichlet, entropy, one_sided_nodes) = fisher_and_entropy(mesh, &f.values, &ones, opts);
    let mut curvature = 0.0;
    let mut shrinker_defect = 0.0;
    let mut exp_mass = 0.0;
    for i in mesh.active_nodes() {
        let fr = mesh.frame(i);
        let w = mesh.weight(i) * f.values[i];
        let x = tau * fr.shrinker_vector_tau(tau).norm_squared();
        curvature += w * fr.mean_curvature.norm_squared();
        shrinker_defect += w * x;
        exp_mass += w * x.exp();
    }
    let jensen = exp_mass.ln();
    let constant = alpha_tau(n, tau);
    let deficit = tau * dirichlet - entropy + tau * curvature - constant;
    let gaussian_form = if tau == 1.0 {
        let phi = DiscreteField::on(
            mesh,
            (0..mesh.len())
                .map(|i| match mesh.try_frame(i) {
                    Some(fr) => f.values[i] / gaussian_density(n, 1.0, fr.position.norm_squared()),
                    None => 0.0,
                })
                .collect(),
        );
        Some(gaussian_form_deficit(mesh, &phi, opts)?)
    } else {
        None
    };
    Ok(DeficitReport {
        n,
        tau,
        mass,
        dirichlet,
        entropy,
        curvature,
        shrinker_defect,
        jensen,
        constant,
        deficit,
        corrected_deficit: deficit - shrinker_defect + jensen,
        jensen_correction: shrinker_defect - jensen,
        gaussian_form,
        one_sided_nodes,
    })
}

/// `∫ |∇φ|²/φ dγ - ∫ φ log φ dγ + m log m` with `m = ∫ φ dγ`; the last
/// term vanishes for normalized `φ`.
pub fn gaussian_form_deficit(mesh: &Mesh, phi: &DiscreteField, opts: &DeficitOptions) -> Result<f64> {
    check_density(mesh, phi, None)?;
    let n = mesh.model().n();
    let gamma: Vec<f64> = (0..mesh.len())
        .map(|i| mesh.try_frame(i).map_or(0.0, |fr| gaussian_density(n, 1.0, fr.position.norm_squared())))
        .collect();
    let (fisher, ent, _) = fisher_and_entropy(mesh, &phi.values, &gamma, opts);
    let m: f64 = mesh.active_nodes().map(|i| mesh.weight(i) * gamma[i] * phi.values[i]).sum();
    if !(m > 0.0) {
        return Err(Error::ZeroMass);
    }
    Ok(fisher - ent + m * m.ln())
}

/// `|∫ (|∇f|²/f - f log f + |H|² f - |x^⊥/2 + H|² f) dvol - α|` for the
/// report of `f_ε` and the `α` produced by the solver for the same density.
pub fn consistency_check(report: &DeficitReport, alpha: f64, report_tau: f64) -> Result<f64> {
    if report.tau != report_tau {
        return Err(Error::MismatchedInputs(format!(
            "report was evaluated at tau = {} but the solution at tau = {report_tau}",
            report.tau
        )));
    }
    let lhs = report.tau * report.dirichlet - report.entropy + report.tau * report.curvature - report.shrinker_defect;
    Ok((lhs - alpha).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ManifoldModel;
    use crate::measure::{normalize, CanonicalDensity, Weight};
    use std::f64::consts::PI;

    fn line(h: f64, r: f64) -> Mesh {
        Mesh::for_model(ManifoldModel::plane(1).unwrap(), h, r).unwrap()
    }

    fn gaussian(mesh: &Mesh, var: f64) -> DiscreteField {
        let f = mesh.field_from_fn(|fr| (-fr.position.norm_squared() / (2.0 * var)).exp());
        normalize(mesh, &f, Weight::Volume).unwrap()
    }

    #[test]
    fn canonical_density_is_extremal() {
        let mesh = line(0.05, 20.0);
        let f0 = CanonicalDensity::new(&mesh, 1.0).unwrap();
        let opts = DeficitOptions { stencil: StencilOrder(6), ..Default::default() };
        let r = deficit(&mesh, &f0.values, 1.0, &opts).unwrap();
        assert!(r.deficit.abs() < 1e-8, "{}", r.deficit);
        assert!(r.gaussian_form.unwrap().abs() < 1e-8);
    }

    #[test]
    fn unit_variance_gaussian() {
        // closed form: 1/σ² + ½ log(2πσ²) + ½ - 1 - ½ log(4π) at σ² = 1
        let expect = 1.0 + 0.5 * (2.0 * PI).ln() + 0.5 - 1.0 - 0.5 * (4.0 * PI).ln();
        let mesh = line(0.05, 20.0);
        let opts = DeficitOptions { stencil: StencilOrder(6), ..Default::default() };
        let r = deficit(&mesh, &gaussian(&mesh, 1.0), 1.0, &opts).unwrap();
        assert!((r.deficit - expect).abs() < 1e-7, "{} vs {expect}", r.deficit);
        assert!((r.deficit - 0.1534264097200273).abs() < 1e-7);
    }

    #[test]
    fn unnormalized_and_negative_are_rejected() {
        let mesh = line(0.1, 10.0);
        let f = gaussian(&mesh, 1.0).scaled(&mesh, 2.0);
        assert!(matches!(deficit(&mesh, &f, 1.0, &Default::default()), Err(Error::NotNormalized { .. })));
        let g = mesh.field_from_fn(|fr| fr.position[0]);
        assert!(matches!(deficit(&mesh, &g, 1.0, &Default::default()), Err(Error::NegativeValues { .. })));
    }

    #[test]
    fn constant_on_circle_has_entropy_deficit() {
        let mesh = Mesh::for_model(ManifoldModel::circle(2f64.sqrt()).unwrap(), 0.05, 5.0).unwrap();
        let lambda = (2.0 * PI / std::f64::consts::E).sqrt();
        let d = gaussian_form_deficit(&mesh, &mesh.constant_field(1.0), &Default::default()).unwrap();
        assert!((d - lambda * lambda.ln()).abs() < 1e-12);
        assert!((d - 0.6370).abs() < 1e-4);
    }

    #[test]
    fn tau_one_deficit_is_the_plain_form() {
        let mesh = Mesh::for_model(ManifoldModel::cylinder(1, 2).unwrap(), 0.1, 8.0).unwrap();
        let f = normalize(&mesh, &mesh.field_from_fn(|fr| (-fr.position.norm_squared() / 3.0).exp()), Weight::Volume).unwrap();
        let r = deficit(&mesh, &f, 1.0, &Default::default()).unwrap();
        assert_eq!(r.deficit, r.tau * r.dirichlet - r.entropy + r.tau * r.curvature - r.constant);
        // on a shrinker the correction terms vanish
        assert!(r.jensen_correction.abs() < 1e-12);
        assert!((r.corrected_deficit - r.deficit).abs() < 1e-12);
    }
}

//! Gaussian entropy `λ(Σ) = ∫ dγ` and parametric upper bounds on the
//! log-Sobolev constant `μ_Σ` taken over test families.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AxisKind, DiscreteField, Mesh};
use crate::lsi::{fisher_and_entropy, DeficitOptions};
use crate::measure::gaussian_density;
use crate::stencil::StencilOrder;

/// `λ(Σ)` with an estimate of the mass lost to truncation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyValue {
    pub lambda: f64,
    /// `dγ`-mass of the outermost band of active nodes; zero when no node is cut.
    pub tail_estimate: f64,
    /// Whether the model is a built-in shrinker, for which `λ ≥ 1` is expected.
    pub shrinker: bool,
}

fn gamma_weights(mesh: &Mesh) -> Vec<f64> {
    let n = mesh.model().n();
    (0..mesh.len())
        .map(|i| mesh.try_frame(i).map_or(0.0, |fr| gaussian_density(n, 1.0, fr.position.norm_squared())))
        .collect()
}

/// `λ(Σ) = ∫_Σ (4π)^(-n/2) e^(-|x|²/4) dvol` by the mesh quadrature.
pub fn entropy(mesh: &Mesh) -> EntropyValue {
    let gamma = gamma_weights(mesh);
    let lambda = mesh.active_nodes().map(|i| mesh.weight(i) * gamma[i]).sum();
    let tail_estimate = if mesh.active_count() == mesh.len() {
        0.0
    } else {
        let edge = mesh.grid().truncation_radius - 2.0 * mesh.grid().max_spacing();
        mesh.active_nodes().filter(|&i| mesh.radius(i) > edge).map(|i| mesh.weight(i) * gamma[i]).sum()
    };
    EntropyValue { lambda, tail_estimate, shrinker: mesh.model().is_builtin_shrinker() }
}

/// Basis `b_1..b_k` spanning a family of test functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFamily {
    /// Ambient coordinates `x_1..x_N` (identically zero ones dropped).
    AmbientLinear,
    /// Per chart axis: `cos jφ, sin jφ` on periodic axes, `cos jθ` on polar
    /// axes, `t^j e^{-t²/8}` on bounded axes, for `j = 1..=order`.
    ChartHarmonics { order: usize },
    /// Nodal values supplied by the caller.
    Custom { name: String, basis: Vec<Vec<f64>> },
}

/// How a parameter vector becomes a (not yet normalized) density.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyForm {
    /// `exp(θ·b)`
    #[default]
    Exponential,
    /// `1 + θ·b`; members that go negative are skipped.
    Affine,
}

impl TestFamily {
    pub fn describe(&self, form: FamilyForm) -> String {
        let base = match self {
            Self::AmbientLinear => "ambient coordinates".to_string(),
            Self::ChartHarmonics { order } => format!("chart harmonics up to order {order}"),
            Self::Custom { name, basis } => format!("{name} ({} functions)", basis.len()),
        };
        match form {
            FamilyForm::Exponential => format!("exp(theta . b), b = {base}"),
            FamilyForm::Affine => format!("1 + theta . b, b = {base}"),
        }
    }

    /// Basis functions sampled on the mesh.
    pub fn basis(&self, mesh: &Mesh) -> Result<Vec<Vec<f64>>> {
        let out: Vec<Vec<f64>> = match self {
            Self::AmbientLinear => (0..mesh.model().ambient_dim())
                .map(|k| mesh.field_from_fn(|fr| fr.position[k]).values)
                .filter(|b| b.iter().any(|v| v.abs() > 1e-14))
                .collect(),
            Self::ChartHarmonics { order } => {
                let mut out = Vec::new();
                for (a, spec) in mesh.grid().axes.iter().enumerate() {
                    for j in 1..=*order {
                        let jf = j as f64;
                        let coord = |f: &dyn Fn(f64) -> f64| -> Vec<f64> {
                            (0..mesh.len())
                                .map(|i| if mesh.is_active(i) { f(mesh.param(i)[a]) } else { 0.0 })
                                .collect()
                        };
                        match spec.kind {
                            AxisKind::Periodic => {
                                out.push(coord(&|t| (jf * t).cos()));
                                out.push(coord(&|t| (jf * t).sin()));
                            }
                            AxisKind::Polar { .. } => out.push(coord(&|t| (jf * t).cos())),
                            AxisKind::Bounded => out.push(coord(&|t| t.powi(j as i32) * (-t * t / 8.0).exp())),
                        }
                    }
                }
                out
            }
            Self::Custom { basis, .. } => {
                if basis.iter().any(|b| b.len() != mesh.len()) {
                    return Err(Error::GridMismatch);
                }
                basis.clone()
            }
        };
        if out.is_empty() {
            return Err(Error::MismatchedInputs("test family has no basis functions".into()));
        }
        Ok(out)
    }
}

/// Search settings for [`mu_estimate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MuOptions {
    pub form: FamilyForm,
    /// Coarse grid `t ∈ [-half_width, half_width]` along each basis axis.
    pub half_width: f64,
    /// Odd, so that `θ = 0` is on the grid.
    pub coarse_points: usize,
    /// Golden-section stops when the bracket is shorter than this.
    pub refine_tol: f64,
    pub stencil: StencilOrder,
}

impl Default for MuOptions {
    fn default() -> Self {
        Self {
            form: FamilyForm::Exponential,
            half_width: 1.0,
            coarse_points: 21,
            refine_tol: 1e-6,
            stencil: StencilOrder(6),
        }
    }
}

/// One evaluated member of the family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapePoint {
    pub axis: usize,
    pub t: f64,
    /// `None` for skipped members (zero mass or negative values).
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub lambda: f64,
    pub tail_estimate: f64,
    pub shrinker: bool,
    pub family: String,
    pub basis_size: usize,
    /// Smallest functional value found: an upper bound on `μ_Σ`.
    pub mu_hat: f64,
    pub theta: Vec<f64>,
    /// `μ̂ + log λ`
    pub gap: f64,
    /// Largest `|∫ ψ dγ̃ - 1|` over the evaluated members.
    pub normalization_error: f64,
    pub skipped: usize,
    pub landscape: Vec<LandscapePoint>,
}

struct Evaluator<'a> {
    mesh: &'a Mesh,
    basis: Vec<Vec<f64>>,
    gamma_tilde: Vec<f64>,
    form: FamilyForm,
    opts: DeficitOptions,
}

impl Evaluator<'_> {
    fn raw(&self, theta: &[f64]) -> Vec<f64> {
        let lin: Vec<f64> = (0..self.mesh.len())
            .map(|i| theta.iter().zip(&self.basis).map(|(t, b)| t * b[i]).sum())
            .collect();
        match self.form {
            FamilyForm::Exponential => {
                let top = self.mesh.active_nodes().map(|i| lin[i]).fold(f64::NEG_INFINITY, f64::max);
                lin.iter().map(|v| (v - top).exp()).collect()
            }
            FamilyForm::Affine => lin.iter().map(|v| 1.0 + v).collect(),
        }
    }

    /// `(∫ |∇ψ|²/ψ dγ̃ - ∫ ψ log ψ dγ̃, normalization error)` for the
    /// normalized member at `θ`.
    fn value(&self, theta: &[f64]) -> Option<(f64, f64)> {
        let mut psi = self.raw(theta);
        if self.mesh.active_nodes().any(|i| !(psi[i] >= 0.0)) {
            return None;
        }
        let z: f64 = self.mesh.active_nodes().map(|i| self.mesh.weight(i) * self.gamma_tilde[i] * psi[i]).sum();
        if !(z > 0.0) || !z.is_finite() {
            return None;
        }
        psi.iter_mut().for_each(|v| *v /= z);
        let field = DiscreteField::on(self.mesh, psi);
        let mass: f64 = self.mesh.active_nodes().map(|i| self.mesh.weight(i) * self.gamma_tilde[i] * field.values[i]).sum();
        let (fisher, ent, _) = fisher_and_entropy(self.mesh, &field.values, &self.gamma_tilde, &self.opts);
        Some((fisher - ent, (mass - 1.0).abs()))
    }

    fn on_axis(&self, axis: usize, t: f64) -> Vec<f64> {
        let mut theta = vec![0.0; self.basis.len()];
        theta[axis] = t;
        theta
    }
}

/// Minimizes the normalized log-Sobolev functional over `θ ↦ ψ_θ`: a
/// coarse scan along each basis axis, then golden-section refinement on
/// the axis holding the best coarse value.
pub fn mu_estimate(mesh: &Mesh, family: &TestFamily, opts: &MuOptions) -> Result<EntropyReport> {
    if opts.coarse_points < 3 || opts.coarse_points % 2 == 0 {
        return Err(Error::MismatchedInputs("coarse_points must be odd and at least 3".into()));
    }
    if !(opts.half_width > 0.0) || !(opts.refine_tol > 0.0) {
        return Err(Error::MismatchedInputs("half_width and refine_tol must be positive".into()));
    }
    let ent = entropy(mesh);
    let basis = family.basis(mesh)?;
    let gamma_tilde: Vec<f64> = gamma_weights(mesh).iter().map(|g| g / ent.lambda).collect();
    let eval = Evaluator {
        mesh,
        basis,
        gamma_tilde,
        form: opts.form,
        opts: DeficitOptions { stencil: opts.stencil, ..Default::default() },
    };
    let k = eval.basis.len();
    let step = 2.0 * opts.half_width / (opts.coarse_points - 1) as f64;
    let jobs: Vec<(usize, f64)> = (0..k)
        .flat_map(|a| (0..opts.coarse_points).map(move |j| (a, -opts.half_width + j as f64 * step)))
        .collect();
    let coarse: Vec<Option<(f64, f64)>> = jobs.par_iter().map(|&(a, t)| eval.value(&eval.on_axis(a, t))).collect();

    let mut landscape: Vec<LandscapePoint> = jobs
        .iter()
        .zip(&coarse)
        .map(|(&(axis, t), v)| LandscapePoint { axis, t, value: v.map(|v| v.0) })
        .collect();
    let mut norm_err = coarse.iter().flatten().map(|v| v.1).fold(0.0, f64::max);
    let mut skipped = coarse.iter().filter(|v| v.is_none()).count();

    let (best_axis, best_t, best_v) = landscape
        .iter()
        .filter_map(|p| p.value.map(|v| (p.axis, p.t, v)))
        .min_by(|a, b| a.2.total_cmp(&b.2))
        .ok_or(Error::ZeroMass)?;

    // golden section on [t* - step, t* + step]
    let g = |t: f64| eval.value(&eval.on_axis(best_axis, t));
    let invphi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (best_t - step, best_t + step);
    let mut best = (best_t, best_v);
    let mut record = |t: f64, v: Option<(f64, f64)>, best: &mut (f64, f64)| -> f64 {
        landscape.push(LandscapePoint { axis: best_axis, t, value: v.map(|v| v.0) });
        match v {
            Some((val, err)) => {
                norm_err = norm_err.max(err);
                if val < best.1 {
                    *best = (t, val);
                }
                val
            }
            None => {
                skipped += 1;
                f64::INFINITY
            }
        }
    };
    let mut c = hi - invphi * (hi - lo);
    let mut d = lo + invphi * (hi - lo);
    let mut fc = record(c, g(c), &mut best);
    let mut fd = record(d, g(d), &mut best);
    while hi - lo > opts.refine_tol {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - invphi * (hi - lo);
            fc = record(c, g(c), &mut best);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + invphi * (hi - lo);
            fd = record(d, g(d), &mut best);
        }
    }

    let mu_hat = best.1;
    Ok(EntropyReport {
        lambda: ent.lambda,
        tail_estimate: ent.tail_estimate,
        shrinker: ent.shrinker,
        family: family.describe(opts.form),
        basis_size: k,
        mu_hat,
        theta: eval.on_axis(best_axis, best.0),
        gap: mu_hat + ent.lambda.ln(),
        normalization_error: norm_err,
        skipped,
        landscape,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ManifoldModel;
    use std::f64::consts::{E, PI};

    fn mesh(model: ManifoldModel, h: f64, r: f64) -> Mesh {
        Mesh::for_model(model, h, r).unwrap()
    }

    #[test]
    fn closed_form_values() {
        let line = entropy(&mesh(ManifoldModel::plane(1).unwrap(), 0.1, 14.0));
        assert!((line.lambda - 1.0).abs() < 1e-10, "{}", line.lambda);
        assert!(line.tail_estimate < 1e-15);
        let s1 = (2.0 * PI / E).sqrt();
        let circle = entropy(&mesh(ManifoldModel::circle(2f64.sqrt()).unwrap(), 0.1, 3.0));
        assert!((circle.lambda - s1).abs() < 1e-12);
        assert_eq!(circle.tail_estimate, 0.0);
        let cyl = entropy(&mesh(ManifoldModel::cylinder(1, 2).unwrap(), 0.1, 14.0));
        assert!((cyl.lambda - s1).abs() < 1e-9);
        let torus = entropy(&mesh(ManifoldModel::shrinking_torus().unwrap(), 0.1, 3.0));
        assert!((torus.lambda - s1 * s1).abs() < 1e-12);
        let s2 = entropy(&mesh(ManifoldModel::sphere(2).unwrap(), 0.05, 3.0));
        assert!((s2.lambda - 4.0 / E).abs() < 1e-3, "{}", s2.lambda);
    }

    #[test]
    fn unit_circle_is_not_a_shrinker() {
        let e = entropy(&mesh(ManifoldModel::circle(1.0).unwrap(), 0.05, 2.0));
        assert!(!e.shrinker);
        assert!((e.lambda - PI.sqrt() * (-0.25f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn constant_member_is_zero() {
        let m = mesh(ManifoldModel::circle(2f64.sqrt()).unwrap(), 0.05, 3.0);
        let opts = MuOptions { coarse_points: 3, refine_tol: 1e-3, ..Default::default() };
        let r = mu_estimate(&m, &TestFamily::ChartHarmonics { order: 1 }, &opts).unwrap();
        let zero = r.landscape.iter().find(|p| p.t == 0.0).unwrap();
        assert!(zero.value.unwrap().abs() < 1e-14);
        assert!(r.mu_hat <= 1e-14);
    }

    #[test]
    fn gaussian_translates_on_the_line_are_extremal() {
        let m = mesh(ManifoldModel::plane(1).unwrap(), 0.05, 20.0);
        let r = mu_estimate(&m, &TestFamily::AmbientLinear, &MuOptions::default()).unwrap();
        assert!(r.landscape.iter().all(|p| p.value.unwrap().abs() < 1e-6));
        assert!(r.gap >= -1e-6);
        assert!(r.normalization_error < 1e-10);
    }

    #[test]
    fn affine_family_on_the_circle() {
        let m = mesh(ManifoldModel::circle(2f64.sqrt()).unwrap(), 0.05, 3.0);
        let opts = MuOptions { form: FamilyForm::Affine, half_width: 1.5, ..Default::default() };
        let r = mu_estimate(&m, &TestFamily::ChartHarmonics { order: 2 }, &opts).unwrap();
        assert!(r.skipped > 0);
        assert!(r.mu_hat >= -(2.0 * PI / E).sqrt().ln() - 1e-6);
        assert!(r.gap >= -1e-6);
    }
}

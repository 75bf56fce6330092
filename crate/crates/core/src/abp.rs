//! The ergodic problem `L w + ℓ = c` for a perturbed density: drift
//! operator, source term, discounted solves and the vanishing-discount
//! limit, with growth and divergence diagnostics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::frame_at;
use crate::grid::{DiscreteField, Mesh, QuadratureRule};
use crate::linalg::{solve_spd, SolverKind, SparseSym};
use crate::measure::{sum_weighted, CanonicalDensity};
use crate::stencil::{partials, StencilOrder};

/// `f_ε = (f + ε f_τ)/(1 + ε)`.
#[derive(Debug, Clone)]
pub struct PerturbedDensity {
    pub epsilon: f64,
    pub tau: f64,
    pub base: DiscreteField,
    pub canonical: CanonicalDensity,
    pub values: DiscreteField,
}

impl PerturbedDensity {
    pub fn new(mesh: &Mesh, f: &DiscreteField, epsilon: f64, tau: f64) -> Result<Self> {
        mesh.check_field(f)?;
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::MismatchedInputs(format!("epsilon must be positive, got {epsilon}")));
        }
        let min = f.min_active(mesh);
        if min < 0.0 {
            return Err(Error::NegativeValues { min });
        }
        let mass = sum_weighted(mesh.weights(), &f.values);
        if !((mass - 1.0).abs() <= 1e-8) {
            return Err(Error::NotNormalized { mass });
        }
        // the density must be negligible on the outer two layers inside the cut
        let margin = mesh.grid().truncation_radius - 2.0 * mesh.grid().max_spacing();
        let edge = mesh.active_nodes().filter(|&i| mesh.radius(i) > margin).map(|i| f.values[i]).fold(0.0, f64::max);
        if !mesh.model().is_compact() && edge > 1e-12 * f.max() {
            return Err(Error::SupportTooLarge);
        }
        let canonical = CanonicalDensity::new(mesh, tau)?;
        let values = DiscreteField::on(
            mesh,
            f.values
                .iter()
                .zip(&canonical.values.values)
                .map(|(a, b)| (a + epsilon * b) / (1.0 + epsilon))
                .collect(),
        );
        Ok(Self { epsilon, tau, base: f.clone(), canonical, values })
    }

    /// Value of `ℓ` wherever `f` vanishes: `log((1 + ε)/ε)`.
    pub fn outside_source(&self) -> f64 {
        ((1.0 + self.epsilon) / self.epsilon).ln()
    }
}

/// What to do when the mesh Péclet number exceeds its limit. The
/// finite-volume operator stays monotone either way.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum PecletPolicy {
    Report,
    Refuse { limit: f64 },
}

impl Default for PecletPolicy {
    fn default() -> Self {
        PecletPolicy::Report
    }
}

/// One interior face between nodes `p` and `q` with conductance `a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Face {
    pub p: usize,
    pub q: usize,
    pub a: f64,
}

/// Weighted Laplacian `L w = Δw + ∇log ρ · ∇w` in conservative
/// finite-volume form: `(L w)_P = (ρ_P V_P)^{-1} Σ_Q a_PQ (w_Q - w_P)`.
#[derive(Debug, Clone)]
pub struct DriftOperator {
    pub rho: DiscreteField,
    pub faces: Vec<Face>,
    /// Global node id of each unknown.
    pub active: Vec<usize>,
    local: Vec<usize>,
    /// `ρ_P V_P` per unknown.
    pub masses: Vec<f64>,
    stiffness: SparseSym,
    /// `max |Δ log ρ| / 2` over faces.
    pub peclet: f64,
}

const INACTIVE: usize = usize::MAX;

impl DriftOperator {
    pub fn new(mesh: &Mesh, rho: &DiscreteField, policy: PecletPolicy) -> Result<Self> {
        mesh.check_field(rho)?;
        if mesh.active_nodes().any(|i| !(rho.values[i] > 0.0)) {
            return Err(Error::MismatchedInputs("drift weight must be strictly positive".into()));
        }
        let orth = mesh
            .active_nodes()
            .map(|i| {
                let g = &mesh.frame(i).metric;
                let mut worst = 0.0f64;
                for a in 0..g.nrows() {
                    for b in 0..a {
                        worst = worst.max(g[(a, b)].abs() / (g[(a, a)] * g[(b, b)]).sqrt());
                    }
                }
                worst
            })
            .fold(0.0, f64::max);
        if orth > 1e-10 {
            return Err(Error::NonOrthogonalChart(orth));
        }

        let active: Vec<usize> = mesh.active_nodes().collect();
        let mut local = vec![INACTIVE; mesh.len()];
        for (k, &g) in active.iter().enumerate() {
            local[g] = k;
        }
        let dim = mesh.dim();
        let grid = mesh.grid();
        let candidates: Vec<(usize, usize, usize)> = active
            .iter()
            .flat_map(|&p| (0..dim).map(move |k| (p, k)))
            .filter_map(|(p, k)| {
                if mesh.crosses_pole(p, k, 1) {
                    return None;
                }
                mesh.neighbor(p, k, 1).map(|q| (p, q, k))
            })
            .collect();
        let faces: Vec<Face> = candidates
            .par_iter()
            .map(|&(p, q, k)| {
                let idx = mesh.multi_index(p);
                let mut mid = mesh.param(p);
                mid[k] += 0.5 * mesh.spacing(k);
                let fr = frame_at(mesh.model(), &mid)?;
                let transverse: f64 = (0..dim)
                    .filter(|&j| j != k)
                    .map(|j| grid.axes[j].weight(idx[j], QuadratureRule::Trapezoid))
                    .product();
                let rho_face = (rho.values[p] * rho.values[q]).sqrt();
                let a = rho_face * fr.sqrt_det_g * fr.metric_inverse[(k, k)] * transverse / mesh.spacing(k);
                Ok(Face { p, q, a })
            })
            .collect::<Result<_>>()?;
        let peclet = faces
            .iter()
            .map(|f| 0.5 * (rho.values[f.q].ln() - rho.values[f.p].ln()).abs())
            .fold(0.0, f64::max);
        if let PecletPolicy::Refuse { limit } = policy {
            if peclet > limit {
                return Err(Error::PecletViolation { peclet, limit });
            }
        }
        let masses: Vec<f64> = active.iter().map(|&g| rho.values[g] * mesh.cell_volume(g)).collect();
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); active.len()];
        for f in &faces {
            let (p, q) = (local[f.p], local[f.q]);
            rows[p].push((p, f.a));
            rows[q].push((q, f.a));
            rows[p].push((q, -f.a));
            rows[q].push((p, -f.a));
        }
        for (i, r) in rows.iter_mut().enumerate() {
            r.push((i, 0.0));
        }
        Ok(Self { rho: rho.clone(), faces, active, local, masses, stiffness: SparseSym::from_rows(rows), peclet })
    }

    pub fn unknowns(&self) -> usize {
        self.active.len()
    }

    pub fn local_index(&self, node: usize) -> Option<usize> {
        let l = self.local[node];
        (l != INACTIVE).then_some(l)
    }

    /// `K` with `(K w)_P = -Σ_Q a_PQ (w_Q - w_P)`.
    pub fn stiffness(&self) -> &SparseSym {
        &self.stiffness
    }

    /// `L u` on every node (zero on inactive ones).
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; u.len()];
        for f in &self.faces {
            let flux = f.a * (u[f.q] - u[f.p]);
            acc[f.p] += flux;
            acc[f.q] -= flux;
        }
        for (k, &g) in self.active.iter().enumerate() {
            acc[g] /= self.masses[k];
        }
        acc
    }

    fn to_global(&self, mesh: &Mesh, v: &[f64]) -> DiscreteField {
        let mut out = vec![0.0; mesh.len()];
        for (k, &g) in self.active.iter().enumerate() {
            out[g] = v[k];
        }
        DiscreteField::on(mesh, out)
    }
}

/// How `ℓ` is assembled from the perturbed density.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceForm {
    /// Difference of the two right-hand sides with the curvature terms
    /// cancelled: `τ|∇log f_ε|² - τ|∇log f_τ|² + ∇q·x^⊤ + log(f_τ/f_ε)`.
    #[default]
    Literal,
    /// The same quantity simplified to `τ|∇q|² - q` with `q = log(f_ε/f_τ)`.
    Reduced,
}

#[derive(Debug, Clone)]
pub struct SourceTerm {
    pub values: DiscreteField,
    pub sup_norm: f64,
    /// Expected value of `ℓ` where `f` vanishes.
    pub outside_value: f64,
    /// Largest deviation from `outside_value` on nodes whose stencil sees no mass.
    pub outside_deviation: f64,
    pub form: SourceForm,
}

impl SourceTerm {
    pub fn new(mesh: &Mesh, density: &PerturbedDensity, form: SourceForm, order: StencilOrder) -> Result<Self> {
        let tau = density.tau;
        let fe = &density.values.values;
        let ft = &density.canonical.values.values;
        let log_fe: Vec<f64> = fe.iter().map(|v| if *v > 0.0 { v.ln() } else { 0.0 }).collect();
        let log_ft: Vec<f64> = ft.iter().map(|v| if *v > 0.0 { v.ln() } else { 0.0 }).collect();
        let q: Vec<f64> = log_fe.iter().zip(&log_ft).map(|(a, b)| a - b).collect();
        let values: Vec<f64> = (0..mesh.len())
            .into_par_iter()
            .map(|i| {
                let Some(fr) = mesh.try_frame(i) else { return Ok(0.0) };
                let stencil_err = || Error::InvalidGrid("node has too few neighbours for a gradient".into());
                Ok(match form {
                    SourceForm::Literal => {
                        let (dle, _) = partials(mesh, &log_fe, i, order).ok_or_else(stencil_err)?;
                        let dlt = -(fr.tangent_basis.transpose() * &fr.position) / (2.0 * tau);
                        let dq = &dle - &dlt;
                        let x_tan_chart = fr.raise(&(fr.tangent_basis.transpose() * &fr.position));
                        tau * (fr.norm_sq_covector(&dle) - fr.norm_sq_covector(&dlt)) + dq.dot(&x_tan_chart)
                            + (log_ft[i] - log_fe[i])
                    }
                    SourceForm::Reduced => {
                        let (dq, _) = partials(mesh, &q, i, order).ok_or_else(stencil_err)?;
                        tau * fr.norm_sq_covector(&dq) - q[i]
                    }
                })
            })
            .collect::<Result<_>>()?;
        let values = DiscreteField::on(mesh, values);
        let outside_value = density.outside_source();
        let reach = order.0 as i64 / 2 + 1;
        let outside_deviation = mesh
            .active_nodes()
            .filter(|&i| {
                (0..mesh.dim()).all(|k| {
                    (-reach..=reach).all(|s| mesh.neighbor(i, k, s).is_none_or(|j| density.base.values[j] == 0.0))
                })
            })
            .map(|i| (values.values[i] - outside_value).abs())
            .fold(0.0, f64::max);
        Ok(Self { sup_norm: values.sup_norm(), values, outside_value, outside_deviation, form })
    }
}

/// Perturbed density, drift operator and source for `f` at `(ε, τ)`.
pub fn assemble(
    mesh: &Mesh,
    f: &DiscreteField,
    epsilon: f64,
    tau: f64,
    opts: &SolverOptions,
) -> Result<(PerturbedDensity, DriftOperator, SourceTerm)> {
    let density = PerturbedDensity::new(mesh, f, epsilon, tau)?;
    let op = DriftOperator::new(mesh, &density.values, opts.peclet)?;
    let src = SourceTerm::new(mesh, &density, opts.source_form, opts.stencil)?;
    Ok((density, op, src))
}

/// Pointwise residual `div(f_τ ∇u_0) - f_τ (log f_τ - τ|∇log f_τ|² - τ|H|²
/// + τ|H + x^⊥/(2τ)|² + α_τ)` under the discrete operator, on interior nodes.
pub fn canonical_pair_residual(mesh: &Mesh, tau: f64) -> Result<DiscreteField> {
    let canon = CanonicalDensity::new(mesh, tau)?;
    let op = DriftOperator::new(mesh, &canon.values, PecletPolicy::Report)?;
    let u0 = CanonicalDensity::u0(mesh);
    let lu = op.apply(&u0.values);
    let values = (0..mesh.len())
        .map(|i| {
            if !mesh.is_interior(i) {
                return 0.0;
            }
            let fr = mesh.frame(i);
            let f = canon.values.values[i];
            let rhs = f.ln() - fr.x_tan.norm_squared() / (4.0 * tau) - tau * fr.mean_curvature.norm_squared()
                + tau * fr.shrinker_vector_tau(tau).norm_squared()
                + canon.alpha_tau;
            f * (lu[i] - rhs)
        })
        .collect();
    Ok(DiscreteField::on(mesh, values))
}

/// Boundary handling on the truncation cut.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Zero normal flux.
    #[default]
    Neumann,
    /// `w = 0` on nodes missing a neighbour.
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// `δ_k = 2^{-k}` for `k` in `0..=max_exponent`.
    pub max_exponent: u32,
    pub tol_c: f64,
    pub tol_w: f64,
    pub solver: SolverKind,
    pub stencil: StencilOrder,
    pub peclet: PecletPolicy,
    pub source_form: SourceForm,
    pub boundary: Boundary,
    /// Slopes `h` of the growth sandwich.
    pub growth_slopes: Vec<f64>,
    /// `R_h` must not exceed this fraction of the truncation radius.
    pub growth_fraction: f64,
    /// Fail with `GrowthViolation` instead of recording it.
    pub strict_growth: bool,
    /// Cutoff radii for the divergence residual; default 1, 2, ... below the cut.
    pub divergence_radii: Option<Vec<f64>>,
    pub dirichlet_diagnostic: bool,
    pub uniqueness_probe: bool,
    pub anchor: Option<usize>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_exponent: 30,
            tol_c: 1e-8,
            tol_w: 1e-7,
            solver: SolverKind::Auto,
            stencil: StencilOrder::default(),
            peclet: PecletPolicy::Report,
            source_form: SourceForm::Literal,
            boundary: Boundary::Neumann,
            growth_slopes: vec![1.0, 0.5, 0.1],
            growth_fraction: 0.5,
            strict_growth: true,
            divergence_radii: None,
            dirichlet_diagnostic: true,
            uniqueness_probe: true,
            anchor: None,
        }
    }
}

/// Unknowns pinned to zero under the Dirichlet condition.
fn pinned(mesh: &Mesh, op: &DriftOperator, boundary: Boundary) -> Vec<bool> {
    op.active.iter().map(|&g| boundary == Boundary::Dirichlet && !mesh.is_interior(g)).collect()
}

/// Solves `(δM + K) x = b` over the unpinned unknowns (pinned ones stay 0).
fn solve_system(
    op: &DriftOperator,
    delta: f64,
    b: &[f64],
    pin: &[bool],
    guess: Option<&[f64]>,
    kind: SolverKind,
) -> Result<Vec<f64>> {
    let free: Vec<usize> = (0..op.unknowns()).filter(|&k| !pin[k]).collect();
    let mut map = vec![INACTIVE; op.unknowns()];
    for (j, &k) in free.iter().enumerate() {
        map[k] = j;
    }
    let rows: Vec<Vec<(usize, f64)>> = free
        .iter()
        .map(|&k| {
            op.stiffness
                .row(k)
                .filter(|(c, _)| map[*c] != INACTIVE)
                .map(|(c, v)| (map[c], if c == k { v + delta * op.masses[k] } else { v }))
                .collect()
        })
        .collect();
    let a = SparseSym::from_rows(rows);
    let rhs: Vec<f64> = free.iter().map(|&k| b[k]).collect();
    let g: Option<Vec<f64>> = guess.map(|g| free.iter().map(|&k| g[k]).collect());
    let x = solve_spd(&a, &rhs, g.as_deref(), kind)?;
    let err = backward_error(&a, &x, &rhs);
    if !(err <= 1e-10) {
        return Err(Error::LinearSolveFailure(format!("normwise backward error {err:e}")));
    }
    let mut out = vec![0.0; op.unknowns()];
    for (j, &k) in free.iter().enumerate() {
        out[k] = x[j];
    }
    Ok(out)
}

/// `‖b - A x‖∞ / (‖A‖∞ ‖x‖∞ + ‖b‖∞)`.
fn backward_error(a: &SparseSym, x: &[f64], b: &[f64]) -> f64 {
    let mut ax = vec![0.0; x.len()];
    a.mul(x, &mut ax);
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    let r: Vec<f64> = ax.iter().zip(b).map(|(p, q)| p - q).collect();
    let a_norm = (0..a.n()).map(|i| a.row(i).map(|(_, v)| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let denom = a_norm * inf(x) + inf(b);
    if denom == 0.0 {
        0.0
    } else {
        inf(&r) / denom
    }
}

/// `M`-weighted mean of `ℓ`, computed as an offset from its minimum.
fn shift(op: &DriftOperator, l: &[f64]) -> f64 {
    let lmin = l.iter().copied().fold(f64::INFINITY, f64::min);
    let mass: f64 = op.masses.iter().sum();
    lmin + op.masses.iter().zip(l).map(|(m, v)| m * (v - lmin)).sum::<f64>() / mass
}

fn local_source(op: &DriftOperator, src: &SourceTerm) -> Vec<f64> {
    op.active.iter().map(|&g| src.values.values[g]).collect()
}

/// `w_δ = s/δ + z`, stored as the pair so that `δ w_δ` keeps full precision.
struct Discounted {
    s: f64,
    z: Vec<f64>,
}

impl Discounted {
    fn value(&self, delta: f64, k: usize) -> f64 {
        self.s / delta + self.z[k]
    }
}

fn discounted(
    mesh: &Mesh,
    op: &DriftOperator,
    l: &[f64],
    delta: f64,
    boundary: Boundary,
    guess: Option<&[f64]>,
    kind: SolverKind,
) -> Result<Discounted> {
    let pin = pinned(mesh, op, boundary);
    if pin.iter().any(|&p| p) {
        // pinned values break the constant shift; solve for w_δ itself
        let b: Vec<f64> = op.masses.iter().zip(l).map(|(m, v)| m * v).collect();
        let w = solve_system(op, delta, &b, &pin, None, kind)?;
        return Ok(Discounted { s: 0.0, z: w });
    }
    let s = shift(op, l);
    let b: Vec<f64> = op.masses.iter().zip(l).map(|(m, v)| m * (v - s)).collect();
    let z = solve_system(op, delta, &b, &pin, guess, kind)?;
    Ok(Discounted { s, z })
}

/// A solution of `δ w - (L w + ℓ) = 0` with its discount-bound check.
#[derive(Debug, Clone)]
pub struct DiscountedSolution {
    pub delta: f64,
    pub values: DiscreteField,
    pub sup_norm: f64,
    pub bound: f64,
}

fn bound_slack(bound: f64) -> f64 {
    1e-8 + 4.0 * f64::EPSILON * bound
}

/// Solves the discounted problem at a single `δ`.
pub fn discounted_solve(
    mesh: &Mesh,
    op: &DriftOperator,
    src: &SourceTerm,
    delta: f64,
    opts: &SolverOptions,
) -> Result<DiscountedSolution> {
    if !(delta > 0.0) {
        return Err(Error::MismatchedInputs(format!("delta must be positive, got {delta}")));
    }
    let l = local_source(op, src);
    let d = discounted(mesh, op, &l, delta, opts.boundary, None, opts.solver)?;
    let w: Vec<f64> = (0..op.unknowns()).map(|k| d.value(delta, k)).collect();
    let sup_norm = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let bound = src.sup_norm / delta;
    if sup_norm > bound + bound_slack(bound) {
        return Err(Error::MaximumPrincipleViolation { delta, sup: sup_norm, bound });
    }
    Ok(DiscountedSolution { delta, values: op.to_global(mesh, &w), sup_norm, bound })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub delta: f64,
    /// `δ · w_δ(anchor)`
    pub scaled_anchor: f64,
    pub sup_norm: f64,
    /// `‖ℓ‖∞ / δ`
    pub bound: f64,
    pub bound_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthEntry {
    pub h: f64,
    /// Smallest node radius `R_h` for which the sandwich holds.
    pub radius: f64,
    /// Smallest margin of the two sandwich inequalities at `R_h`.
    pub margin: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceEntry {
    pub radius: f64,
    /// Net outward flux `∫_{B_r} div(f_ε ∇u) dvol`.
    pub flux: f64,
    /// `∫_{B_r} f_ε |∇u|² dvol`.
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletDiagnostic {
    pub delta: f64,
    pub c: f64,
    pub alpha: f64,
    pub c_difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessProbe {
    pub anchor: usize,
    pub solver: SolverKind,
    pub c: f64,
    pub c_difference: f64,
}

/// The limit pair `(w, c)` and everything recorded on the way.
#[derive(Debug, Clone)]
pub struct ErgodicSolution {
    pub tau: f64,
    pub epsilon: Option<f64>,
    pub w: DiscreteField,
    pub u: DiscreteField,
    pub c: f64,
    pub alpha_tau: f64,
    pub alpha: f64,
    pub anchor: usize,
    pub trace: Vec<TraceEntry>,
    pub growth: Vec<GrowthEntry>,
    pub divergence: Vec<DivergenceEntry>,
    pub dirichlet: Option<DirichletDiagnostic>,
    pub uniqueness: Option<UniquenessProbe>,
    /// `M`-weighted mean of `ℓ`: the exact discrete ergodic constant.
    pub source_mean: f64,
    pub source_sup: f64,
    pub peclet: f64,
}

impl ErgodicSolution {
    pub fn bound_violations(&self) -> usize {
        self.trace.iter().filter(|t| !t.bound_ok).count()
    }
}

struct Limit {
    c: f64,
    v: Vec<f64>,
    delta: f64,
    trace: Vec<TraceEntry>,
}

fn limit(mesh: &Mesh, op: &DriftOperator, src: &SourceTerm, anchor: usize, opts: &SolverOptions, kind: SolverKind) -> Result<Limit> {
    let l = local_source(op, src);
    let a = op
        .local_index(anchor)
        .ok_or_else(|| Error::MismatchedInputs("anchor is not an active node".into()))?;
    let r_inner = 0.5 * mesh.grid().truncation_radius;
    let inner: Vec<usize> = (0..op.unknowns()).filter(|&k| mesh.radius(op.active[k]) <= r_inner).collect();
    let mut trace = Vec::new();
    // raw (c_k, v_k) and the extrapolated (2c_k - c_{k-1}, 2v_k - v_{k-1})
    let mut prev_raw: Option<(f64, Vec<f64>)> = None;
    let mut prev: Option<(f64, Vec<f64>)> = None;
    let mut guess: Option<Vec<f64>> = None;
    let (mut last_dc, mut last_dw) = (f64::NAN, f64::NAN);
    for k in 0..=opts.max_exponent {
        let delta = 0.5f64.powi(k as i32);
        let d = discounted(mesh, op, &l, delta, Boundary::Neumann, guess.as_deref(), kind)?;
        let sup_norm = (0..op.unknowns()).map(|j| d.value(delta, j).abs()).fold(0.0, f64::max);
        let bound = src.sup_norm / delta;
        let c = d.s + delta * d.z[a];
        trace.push(TraceEntry { delta, scaled_anchor: c, sup_norm, bound, bound_ok: sup_norm <= bound + bound_slack(bound) });
        let v: Vec<f64> = d.z.iter().map(|z| z - d.z[a]).collect();
        // both sequences are analytic in δ, so one Richardson step removes the O(δ) term
        let est = prev_raw.as_ref().map(|(pc, pv)| (2.0 * c - pc, v.iter().zip(pv).map(|(x, y)| 2.0 * x - y).collect::<Vec<f64>>()));
        if let (Some((ec, ev)), Some((pc, pv))) = (&est, &prev) {
            last_dc = (ec - pc).abs();
            last_dw = inner.iter().map(|&j| (ev[j] - pv[j]).abs()).fold(0.0, f64::max);
            if last_dc < opts.tol_c && last_dw < opts.tol_w {
                let (c, v) = est.unwrap();
                return Ok(Limit { c, v, delta, trace });
            }
        }
        guess = Some(d.z.clone());
        prev_raw = Some((c, v));
        prev = est;
    }
    Err(Error::NoConvergence { last_dc, last_dw })
}

/// Runs the discount schedule until `δ w_δ(anchor)` and `w_δ - w_δ(anchor)`
/// settle, then records the structural diagnostics of the limit.
pub fn vanishing_discount(
    mesh: &Mesh,
    density: Option<&PerturbedDensity>,
    op: &DriftOperator,
    src: &SourceTerm,
    tau: f64,
    opts: &SolverOptions,
) -> Result<ErgodicSolution> {
    let anchor = opts.anchor.unwrap_or(mesh.anchor());
    let lim = limit(mesh, op, src, anchor, opts, opts.solver)?;
    let alpha_tau = crate::measure::alpha_tau(mesh.model().n(), tau);
    let w = op.to_global(mesh, &lim.v);
    let u0 = CanonicalDensity::u0(mesh);
    let u = DiscreteField::on(mesh, u0.values.iter().zip(&w.values).map(|(a, b)| a + b).collect());

    let growth = growth_sandwich(mesh, &w, &opts.growth_slopes, opts.growth_fraction);
    if opts.strict_growth {
        if let Some(g) = growth.iter().find(|g| !g.valid) {
            return Err(Error::GrowthViolation { h: g.h });
        }
    }
    let radii = opts.divergence_radii.clone().unwrap_or_else(|| default_radii(mesh));
    let divergence = divergence_residual(mesh, op, &u, &radii)?;

    let l = local_source(op, src);
    let dirichlet = if opts.dirichlet_diagnostic && op.active.iter().any(|&g| !mesh.is_interior(g)) {
        // same extrapolation as the Neumann limit, from δ and 2δ
        let a = op.local_index(anchor).unwrap();
        let scaled = |delta: f64| -> Result<f64> {
            Ok(delta * discounted(mesh, op, &l, delta, Boundary::Dirichlet, None, opts.solver)?.z[a])
        };
        let c = 2.0 * scaled(lim.delta)? - scaled(2.0 * lim.delta)?;
        Some(DirichletDiagnostic { delta: lim.delta, c, alpha: alpha_tau + c, c_difference: (c - lim.c).abs() })
    } else {
        None
    };
    let uniqueness = if opts.uniqueness_probe {
        let other = probe_anchor(mesh, anchor);
        let kind = match opts.solver {
            SolverKind::Iterative => SolverKind::Direct,
            _ => SolverKind::Iterative,
        };
        // only the constant is compared, so the iterative route need not resolve w as tightly
        let relaxed = SolverOptions { tol_w: f64::INFINITY, ..opts.clone() };
        let second = limit(mesh, op, src, other, &relaxed, kind)?;
        Some(UniquenessProbe { anchor: other, solver: kind, c: second.c, c_difference: (second.c - lim.c).abs() })
    } else {
        None
    };

    Ok(ErgodicSolution {
        tau,
        epsilon: density.map(|d| d.epsilon),
        w,
        u,
        c: lim.c,
        alpha_tau,
        alpha: alpha_tau + lim.c,
        anchor,
        trace: lim.trace,
        growth,
        divergence,
        dirichlet,
        uniqueness,
        source_mean: shift(op, &l),
        source_sup: src.sup_norm,
        peclet: op.peclet,
    })
}

/// Interior node about one ambient unit farther out than `anchor` (less on
/// small grids). `c_k - c` scales like `δ w(anchor)`, so a nearby second
/// anchor converges on the same schedule.
fn probe_anchor(mesh: &Mesh, anchor: usize) -> usize {
    let r_max = mesh.active_nodes().map(|i| mesh.radius(i)).fold(0.0, f64::max);
    let r0 = mesh.radius(anchor);
    let target = r0 + (0.25 * (r_max - r0)).min(1.0);
    mesh.active_nodes()
        .filter(|&i| i != anchor && mesh.is_interior(i))
        .min_by(|&a, &b| (mesh.radius(a) - target).abs().total_cmp(&(mesh.radius(b) - target).abs()))
        .unwrap_or(anchor)
}

fn default_radii(mesh: &Mesh) -> Vec<f64> {
    let r = mesh.grid().truncation_radius;
    let top = (r - 1e-9).floor() as usize;
    (1..=top.max(1)).map(|k| k as f64).collect()
}

/// Assemble, solve, and take the limit in one call.
pub fn solve(
    mesh: &Mesh,
    f: &DiscreteField,
    epsilon: f64,
    tau: f64,
    opts: &SolverOptions,
) -> Result<(PerturbedDensity, SourceTerm, ErgodicSolution)> {
    let (density, op, src) = assemble(mesh, f, epsilon, tau, opts)?;
    let sol = vanishing_discount(mesh, Some(&density), &op, &src, tau, opts)?;
    Ok((density, src, sol))
}

/// Growth sandwich for each slope `h`: the smallest node radius `R_h` with
/// `min_{B_R} w - h|x|²/2 ≤ w(x) ≤ max_{B_R} w + h|x|²/2` everywhere.
pub fn growth_sandwich(mesh: &Mesh, w: &DiscreteField, slopes: &[f64], fraction: f64) -> Vec<GrowthEntry> {
    let mut nodes: Vec<usize> = mesh.active_nodes().collect();
    nodes.sort_by(|&a, &b| mesh.radius(a).total_cmp(&mesh.radius(b)));
    let m = nodes.len();
    let r: Vec<f64> = nodes.iter().map(|&i| mesh.radius(i)).collect();
    let wv: Vec<f64> = nodes.iter().map(|&i| w.values[i]).collect();
    let r_cut = fraction * mesh.grid().truncation_radius;
    slopes
        .iter()
        .map(|&h| {
            // suffix extremes of w ∓ h r²/2 over nodes strictly farther out
            let mut hi = vec![f64::NEG_INFINITY; m + 1];
            let mut lo = vec![f64::INFINITY; m + 1];
            for j in (0..m).rev() {
                hi[j] = hi[j + 1].max(wv[j] - 0.5 * h * r[j] * r[j]);
                lo[j] = lo[j + 1].min(wv[j] + 0.5 * h * r[j] * r[j]);
            }
            let (mut wmin, mut wmax) = (f64::INFINITY, f64::NEG_INFINITY);
            let mut j = 0;
            loop {
                // include every node at the current radius
                let rj = r[j];
                while j < m && r[j] <= rj {
                    wmin = wmin.min(wv[j]);
                    wmax = wmax.max(wv[j]);
                    j += 1;
                }
                let margin = (wmax - hi[j]).min(lo[j] - wmin);
                if margin >= 0.0 || j == m {
                    return GrowthEntry { h, radius: rj, margin, valid: margin >= 0.0 && rj <= r_cut };
                }
            }
        })
        .collect()
}

/// Net flux of `f_ε ∇u` out of `B_r` and the weighted Dirichlet energy
/// inside, for each radius, from the operator's face conductances.
pub fn divergence_residual(mesh: &Mesh, op: &DriftOperator, u: &DiscreteField, radii: &[f64]) -> Result<Vec<DivergenceEntry>> {
    mesh.check_field(u)?;
    Ok(radii
        .iter()
        .map(|&r| {
            let (mut flux, mut energy) = (0.0, 0.0);
            for f in &op.faces {
                let (ip, iq) = (mesh.radius(f.p) <= r, mesh.radius(f.q) <= r);
                let du = u.values[f.q] - u.values[f.p];
                match (ip, iq) {
                    (true, true) => energy += f.a * du * du,
                    (true, false) => flux += f.a * du,
                    (false, true) => flux -= f.a * du,
                    (false, false) => {}
                }
            }
            DivergenceEntry { radius: r, flux, energy }
        })
        .collect())
}

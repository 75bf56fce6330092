//! Sampled checks of the normal map `Φ(x, y) = ∇u(x) + y`: surjectivity
//! probes, the Jacobian determinant bound on `U`, and the pushed-forward
//! mass ratio.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DiscreteField, Mesh};
use crate::stencil::{covariant_hessian, partials, StencilOrder};

/// Everything the certificate needs about one solved case at `τ = 1`.
#[derive(Debug, Clone, Copy)]
pub struct TransportInput<'a> {
    /// Density `f_ε` (or `f_0`).
    pub density: &'a DiscreteField,
    /// Correction `w` in `u = |x|²/2 + w`.
    pub w: &'a DiscreteField,
    pub alpha: f64,
    pub stencil: StencilOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianSample {
    pub node: usize,
    pub param: Vec<f64>,
    pub y: Vec<f64>,
    pub in_u: bool,
    pub min_eigenvalue: f64,
    pub det: f64,
    pub bound: f64,
    /// Pointwise PDE residual entering the allowance `e^{max(r, 0)} - 1`.
    pub pde_residual: f64,
    pub violation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurjectivityProbe {
    pub target: Vec<f64>,
    pub node: usize,
    pub param: Vec<f64>,
    pub minimizer: Vec<f64>,
    /// `|∇u(x̄) + ξ^⊥ - ξ|`
    pub recovery_error: f64,
    pub hessian_psd: bool,
    pub interior: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportCertificate {
    pub samples: Vec<JacobianSample>,
    /// Requested samples without a usable Hessian stencil.
    pub skipped: usize,
    pub in_u: usize,
    pub violations: usize,
    /// Largest `det / bound` over samples in `U`.
    pub worst_ratio: f64,
    pub probes: Vec<SurjectivityProbe>,
    pub probes_recovered: usize,
    pub probes_interior: usize,
    pub mass_ratio: f64,
}

/// Relative slack on the determinant bound.
pub const DET_SLACK: f64 = 1e-6;
/// Eigenvalues above `-EIG_TOL` count as nonnegative.
pub const EIG_TOL: f64 = 1e-10;

/// Lowered Hessian of `u = |x|²/2 + w` at `node`: `g + <II, x^⊥> + ∇²w`.
fn hessian_u(mesh: &Mesh, w: &[f64], node: usize, order: StencilOrder) -> Option<DMatrix<f64>> {
    let fr = mesh.frame(node);
    let n = fr.n();
    let hw = covariant_hessian(mesh, w, node, order)?;
    let mut h = fr.metric.clone() + hw;
    for i in 0..n {
        for j in 0..n {
            h[(i, j)] += fr.second_fundamental_at(i, j).dot(&fr.x_nor);
        }
    }
    Some(h)
}

/// Ambient `∇u = x^⊤ + ∇w`.
fn gradient_u(mesh: &Mesh, w: &[f64], node: usize, order: StencilOrder) -> Option<DVector<f64>> {
    let fr = mesh.frame(node);
    let (d, _) = partials(mesh, w, node, order)?;
    Some(&fr.x_tan + fr.ambient_gradient(&d))
}

/// Eigenvalues of `g^{-1/2} M g^{-1/2}`.
fn relative_eigenvalues(g: &DMatrix<f64>, m: &DMatrix<f64>) -> DVector<f64> {
    let l = g.clone().cholesky().expect("metric is positive definite").l();
    let li = l.try_inverse().expect("cholesky factor is invertible");
    let s = &li * m * li.transpose();
    let s = (&s + s.transpose()) * 0.5;
    s.symmetric_eigen().eigenvalues
}

/// `f(x) e^{|Φ|²/4 - |2H + y|²/4 + |x^⊥/2 + H|² + α - n}`.
pub fn det_bound(f: f64, phi: &DVector<f64>, h: &DVector<f64>, y: &DVector<f64>, shrinker: &DVector<f64>, alpha: f64, n: usize) -> f64 {
    let two_h_y = h * 2.0 + y;
    f * (phi.norm_squared() / 4.0 - two_h_y.norm_squared() / 4.0 + shrinker.norm_squared() + alpha - n as f64).exp()
}

/// One Jacobian sample at `(node, y)`; `None` if a stencil is missing.
pub fn jacobian_sample(mesh: &Mesh, input: &TransportInput, node: usize, y: &DVector<f64>) -> Option<JacobianSample> {
    sample_with(mesh, input, &log_density(input.density), node, y)
}

fn log_density(f: &DiscreteField) -> Vec<f64> {
    f.values.iter().map(|v| if *v > 0.0 { v.ln() } else { 0.0 }).collect()
}

fn sample_with(mesh: &Mesh, input: &TransportInput, log_f: &[f64], node: usize, y: &DVector<f64>) -> Option<JacobianSample> {
    let fr = mesh.frame(node);
    let n = fr.n();
    let w = &input.w.values;
    let hess = hessian_u(mesh, w, node, input.stencil)?;
    let grad = gradient_u(mesh, w, node, input.stencil)?;
    let f = input.density.values[node];
    if !(f > 0.0) {
        return None;
    }
    let (dlf, _) = partials(mesh, log_f, node, input.stencil)?;
    let grad_log_f = fr.ambient_gradient(&dlf);

    let mut m = hess;
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] -= fr.second_fundamental_at(i, j).dot(y);
        }
    }
    let eig = relative_eigenvalues(&fr.metric, &m);
    let min_eigenvalue = eig.min();
    let det: f64 = eig.iter().product();
    let in_u = min_eigenvalue >= -EIG_TOL;
    let phi = &grad + y;
    let shrinker = fr.shrinker_vector();
    let bound = det_bound(f, &phi, &fr.mean_curvature, y, &shrinker, input.alpha, n);

    // trace of the stencil Hessian against the Laplacian the equation prescribes
    let trace: f64 = eig.iter().sum::<f64>() + fr.mean_curvature.dot(y);
    let laplacian = -grad_log_f.dot(&grad) + f.ln() - grad_log_f.norm_squared() - fr.mean_curvature.norm_squared()
        + shrinker.norm_squared()
        + input.alpha;
    let pde_residual = trace - laplacian;
    let allowance = pde_residual.max(0.0).exp() - 1.0;
    let violation = in_u && (det < -EIG_TOL || det > bound * (1.0 + DET_SLACK + allowance));
    Some(JacobianSample {
        node,
        param: mesh.param(node),
        y: y.iter().copied().collect(),
        in_u,
        min_eigenvalue,
        det,
        bound,
        pde_residual,
        violation,
    })
}

/// Random interior nodes with normal offsets of length up to `y_scale`.
pub fn random_samples(mesh: &Mesh, count: usize, y_scale: f64, radius: f64, seed: u64) -> Vec<(usize, DVector<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<usize> = mesh.active_nodes().filter(|&i| mesh.is_interior(i) && mesh.radius(i) <= radius).collect();
    if pool.is_empty() {
        return Vec::new();
    }
    let dim = mesh.model().ambient_dim();
    (0..count)
        .map(|_| {
            let node = pool[rng.random_range(0..pool.len())];
            let v = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
            let y = mesh.frame(node).project_normal(&v) * (y_scale * rng.random_range(0.0..1.0));
            (node, y)
        })
        .collect()
}

/// Evaluates every sample; those without a stencil are counted as skipped.
pub fn jacobian_check(mesh: &Mesh, input: &TransportInput, samples: &[(usize, DVector<f64>)]) -> Result<(Vec<JacobianSample>, usize)> {
    mesh.check_field(input.density)?;
    mesh.check_field(input.w)?;
    let log_f = log_density(input.density);
    let out: Vec<Option<JacobianSample>> =
        samples.par_iter().map(|(node, y)| sample_with(mesh, input, &log_f, *node, y)).collect();
    let skipped = out.iter().filter(|s| s.is_none()).count();
    Ok((out.into_iter().flatten().collect(), skipped))
}

fn well_inside(mesh: &Mesh, node: usize) -> bool {
    mesh.is_interior(node)
        && (0..mesh.dim()).all(|a| {
            [-1i64, 1].iter().all(|&s| mesh.neighbor(node, a, s).is_some_and(|j| mesh.is_interior(j)))
        })
}

/// Grid minimizer of `u(x) - <x, ξ>` and the recovery error of `Φ` there.
pub fn surjectivity_probe(mesh: &Mesh, input: &TransportInput, target: &DVector<f64>) -> Result<SurjectivityProbe> {
    mesh.check_field(input.w)?;
    if target.len() != mesh.model().ambient_dim() {
        return Err(Error::MismatchedInputs("target must live in the ambient space".into()));
    }
    let w = &input.w.values;
    let node = mesh
        .active_nodes()
        .min_by(|&a, &b| {
            let q = |i: usize| {
                let x = &mesh.frame(i).position;
                0.5 * x.norm_squared() + w[i] - x.dot(target)
            };
            q(a).total_cmp(&q(b))
        })
        .ok_or(Error::ZeroMass)?;
    if !well_inside(mesh, node) {
        return Err(Error::MinimizerOnBoundary);
    }
    let fr = mesh.frame(node);
    let grad = gradient_u(mesh, w, node, input.stencil).ok_or(Error::MinimizerOnBoundary)?;
    let normal = fr.project_normal(target);
    let recovery_error = (&grad + &normal - target).norm();
    let mut m = hessian_u(mesh, w, node, input.stencil).ok_or(Error::MinimizerOnBoundary)?;
    for i in 0..fr.n() {
        for j in 0..fr.n() {
            m[(i, j)] -= fr.second_fundamental_at(i, j).dot(&normal);
        }
    }
    let hessian_psd = relative_eigenvalues(&fr.metric, &m).min() >= -EIG_TOL;
    Ok(SurjectivityProbe {
        target: target.iter().copied().collect(),
        node,
        param: mesh.param(node),
        minimizer: fr.position.iter().copied().collect(),
        recovery_error,
        hessian_psd,
        interior: true,
    })
}

/// Uniform random targets in the cube `[-half_width, half_width]^{n+m}`.
pub fn random_targets(dim: usize, count: usize, half_width: f64, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-half_width..=half_width))).collect()
}

/// `(4π)^{-n/2} e^{α-n} ∫ f e^{|x^⊥/2 + H|²} dvol`; at least 1 when `α`
/// comes from a solved pair.
pub fn mass_inequality(mesh: &Mesh, density: &DiscreteField, alpha: f64) -> Result<f64> {
    mesh.check_field(density)?;
    let n = mesh.model().n() as f64;
    let integral: f64 = mesh
        .active_nodes()
        .map(|i| mesh.weight(i) * density.values[i] * mesh.frame(i).shrinker_vector().norm_squared().exp())
        .sum();
    Ok((4.0 * PI).powf(-n / 2.0) * (alpha - n).exp() * integral)
}

/// Full certificate: Jacobian samples, surjectivity probes and the mass ratio.
pub fn certify(
    mesh: &Mesh,
    input: &TransportInput,
    samples: &[(usize, DVector<f64>)],
    targets: &[DVector<f64>],
    spacing: f64,
) -> Result<TransportCertificate> {
    let (samples, skipped) = jacobian_check(mesh, input, samples)?;
    let in_u = samples.iter().filter(|s| s.in_u).count();
    let violations = samples.iter().filter(|s| s.violation).count();
    let worst_ratio = samples.iter().filter(|s| s.in_u).map(|s| s.det / s.bound).fold(0.0, f64::max);
    let probes: Vec<SurjectivityProbe> = targets
        .par_iter()
        .map(|t| match surjectivity_probe(mesh, input, t) {
            Ok(p) => Ok(p),
            Err(Error::MinimizerOnBoundary) => Ok(SurjectivityProbe {
                target: t.iter().copied().collect(),
                node: usize::MAX,
                param: Vec::new(),
                minimizer: Vec::new(),
                recovery_error: f64::INFINITY,
                hessian_psd: false,
                interior: false,
            }),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let probes_interior = probes.iter().filter(|p| p.interior).count();
    let probes_recovered = probes.iter().filter(|p| p.interior && p.recovery_error <= 2.0 * spacing).count();
    Ok(TransportCertificate {
        samples,
        skipped,
        in_u,
        violations,
        worst_ratio,
        probes,
        probes_recovered,
        probes_interior,
        mass_ratio: mass_inequality(mesh, input.density, input.alpha)?,
    })
}

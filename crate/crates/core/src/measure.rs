//! Quadrature on sampled manifolds, the canonical Gaussian density and
//! polynomial volume-growth diagnostics.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GeometryFrame;
use crate::grid::{DiscreteField, Mesh};

/// Volume form used by [`integrate_weighted`] and [`normalize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weight {
    /// Riemannian volume `dvol`.
    Volume,
    /// `dγ = (4π)^(-n/2) e^(-|x|²/4) dvol`.
    Gaussian,
}

/// `(4πτ)^(-n/2) e^(-|x|²/(4τ))` at a point of squared radius `r2`.
pub fn gaussian_density(n: usize, tau: f64, r2: f64) -> f64 {
    (4.0 * PI * tau).powf(-(n as f64) / 2.0) * (-r2 / (4.0 * tau)).exp()
}

/// `α_τ = n + (n/2) log(4πτ)`.
pub fn alpha_tau(n: usize, tau: f64) -> f64 {
    let n = n as f64;
    n + 0.5 * n * (4.0 * PI * tau).ln()
}

/// `∫_Σ field dvol` with the grid's quadrature rule and the area element.
pub fn integrate(mesh: &Mesh, field: &DiscreteField) -> Result<f64> {
    mesh.check_field(field)?;
    Ok(sum_weighted(mesh.weights(), &field.values))
}

/// `∫_Σ field dvol` or `∫_Σ field dγ`.
pub fn integrate_weighted(mesh: &Mesh, field: &DiscreteField, weight: Weight) -> Result<f64> {
    mesh.check_field(field)?;
    Ok(match weight {
        Weight::Volume => sum_weighted(mesh.weights(), &field.values),
        Weight::Gaussian => {
            let n = mesh.model().n();
            mesh.active_nodes()
                .map(|i| mesh.weight(i) * field.values[i] * gaussian_density(n, 1.0, mesh.frame(i).position.norm_squared()))
                .sum()
        }
    })
}

/// Fixed-order dot product so repeated runs agree bitwise.
pub(crate) fn sum_weighted(w: &[f64], v: &[f64]) -> f64 {
    w.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Rescales `field` so that its integral against `weight` equals 1.
pub fn normalize(mesh: &Mesh, field: &DiscreteField, weight: Weight) -> Result<DiscreteField> {
    let mass = integrate_weighted(mesh, field, weight)?;
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(Error::ZeroMass);
    }
    Ok(field.scaled(mesh, 1.0 / mass))
}

/// The canonical density `f_τ` on a mesh, together with `α_τ`.
#[derive(Debug, Clone)]
pub struct CanonicalDensity {
    pub tau: f64,
    pub values: DiscreteField,
    pub alpha_tau: f64,
}

impl CanonicalDensity {
    pub fn new(mesh: &Mesh, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::InvalidModel(format!("tau must be positive, got {tau}")));
        }
        let n = mesh.model().n();
        let values = mesh.field_from_fn(|f| gaussian_density(n, tau, f.position.norm_squared()));
        Ok(Self { tau, values, alpha_tau: alpha_tau(n, tau) })
    }

    /// `u_0 = |x|²/2` on the same mesh.
    pub fn u0(mesh: &Mesh) -> DiscreteField {
        mesh.field_from_fn(|f| 0.5 * f.position.norm_squared())
    }
}

/// Compactly supported `C²` bump `(1 - |x - c|²/w²)³₊` in ambient coordinates.
pub fn bump(mesh: &Mesh, center: &[f64], width: f64) -> DiscreteField {
    mesh.field_from_fn(|f: &GeometryFrame| {
        let d2: f64 = f.position.iter().zip(center.iter().chain(std::iter::repeat(&0.0))).map(|(x, c)| (x - c).powi(2)).sum();
        let t = 1.0 - d2 / (width * width);
        if t > 0.0 {
            t * t * t
        } else {
            0.0
        }
    })
}

/// Result of [`growth_diagnostic`]: `vol(Σ ∩ B(r)) ≈ c r^k`, `max |H| ≈ c_H r^l`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrowthCheck {
    pub radii: Vec<f64>,
    pub volumes: Vec<f64>,
    pub volume_exponent: f64,
    pub volume_constant: f64,
    pub volume_fit_residual: f64,
    pub max_mean_curvature: Vec<f64>,
    pub curvature_exponent: f64,
    pub curvature_constant: f64,
    pub curvature_fit_residual: f64,
    pub volumes_monotone: bool,
}

/// Least-squares line through `(log x, log y)` over pairs with `y > 0`:
/// returns `(slope, exp(intercept), rms residual)`.
fn log_log_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let pts: Vec<(f64, f64)> = x.iter().zip(y).filter(|(_, &v)| v > 1e-300).map(|(a, b)| (a.ln(), b.ln())).collect();
    match pts.len() {
        0 => (0.0, 0.0, 0.0),
        1 => (0.0, pts[0].1.exp(), 0.0),
        m => {
            let mf = m as f64;
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / mf;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / mf;
            let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
            let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
            let icpt = my - slope * mx;
            let rms = (pts.iter().map(|p| (p.1 - icpt - slope * p.0).powi(2)).sum::<f64>() / mf).sqrt();
            (slope, icpt.exp(), rms)
        }
    }
}

/// Extrinsic-ball volume growth and mean-curvature growth over the radii.
pub fn growth_diagnostic(mesh: &Mesh, radii: &[f64]) -> Result<GrowthCheck> {
    if radii.len() < 3 {
        return Err(Error::InsufficientRadii(radii.len()));
    }
    if radii.windows(2).any(|w| !(w[1] > w[0])) || radii[0] <= 0.0 {
        return Err(Error::MismatchedInputs("radii must be positive and increasing".into()));
    }
    if radii[radii.len() - 1] > mesh.grid().truncation_radius * (1.0 + 1e-12) {
        return Err(Error::MismatchedInputs("radii must lie within the truncation radius".into()));
    }
    let mut volumes = Vec::with_capacity(radii.len());
    let mut max_h = Vec::with_capacity(radii.len());
    for &r in radii {
        let (mut v, mut h) = (0.0, 0.0f64);
        for i in mesh.active_nodes().filter(|&i| mesh.radius(i) <= r) {
            v += mesh.weight(i);
            h = h.max(mesh.frame(i).mean_curvature.norm());
        }
        volumes.push(v);
        max_h.push(h);
    }
    let (k, c, res) = log_log_fit(radii, &volumes);
    let (l, ch, hres) = log_log_fit(radii, &max_h);
    Ok(GrowthCheck {
        radii: radii.to_vec(),
        volumes_monotone: volumes.windows(2).all(|w| w[1] >= w[0]),
        volumes,
        volume_exponent: k,
        volume_constant: c,
        volume_fit_residual: res,
        max_mean_curvature: max_h,
        curvature_exponent: l,
        curvature_constant: ch,
        curvature_fit_residual: hres,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ManifoldModel;
    use crate::grid::{AxisSpec, GridSpec, QuadratureRule};
    use approx::assert_abs_diff_eq;

    #[test]
    fn gaussian_has_unit_mass_on_line_and_plane() {
        for n in [1usize, 2] {
            let mesh = Mesh::for_model(ManifoldModel::plane(n).unwrap(), 0.2, 40.0).unwrap();
            let f0 = CanonicalDensity::new(&mesh, 1.0).unwrap();
            assert_abs_diff_eq!(integrate(&mesh, &f0.values).unwrap(), 1.0, epsilon = 1e-10);
            // normalizing f0 leaves it unchanged
            let g = normalize(&mesh, &f0.values, Weight::Volume).unwrap();
            let diff = g.values.iter().zip(&f0.values.values).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(diff < 1e-10);
        }
    }

    #[test]
    fn cylinder_area() {
        let m = ManifoldModel::cylinder(1, 2).unwrap();
        let grid = GridSpec::new(
            vec![AxisSpec::periodic(0.0, 2.0 * PI, 32), AxisSpec::bounded(-3.0, 3.0, 61)],
            10.0,
            QuadratureRule::Trapezoid,
        )
        .unwrap();
        let mesh = Mesh::new(m, grid).unwrap();
        let one = mesh.constant_field(1.0);
        assert_abs_diff_eq!(integrate(&mesh, &one).unwrap(), 2.0 * PI * 2f64.sqrt() * 6.0, epsilon = 1e-10);
    }

    #[test]
    fn shrinking_circle_gaussian_mass() {
        let mesh = Mesh::for_model(ManifoldModel::sphere(1).unwrap(), 0.1, 10.0).unwrap();
        let one = mesh.constant_field(1.0);
        let lam = integrate_weighted(&mesh, &one, Weight::Gaussian).unwrap();
        assert_abs_diff_eq!(lam, (2.0 * PI / std::f64::consts::E).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn normalize_unit_area_and_zero_mass() {
        let grid = GridSpec::new(vec![AxisSpec::bounded(0.0, 1.0, 11)], 10.0, QuadratureRule::Trapezoid).unwrap();
        let mesh = Mesh::new(ManifoldModel::plane(1).unwrap(), grid).unwrap();
        let two = mesh.constant_field(2.0);
        let one = normalize(&mesh, &two, Weight::Volume).unwrap();
        assert!(one.values.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let zero = mesh.constant_field(0.0);
        assert!(matches!(normalize(&mesh, &zero, Weight::Volume), Err(Error::ZeroMass)));
    }

    #[test]
    fn grid_mismatch() {
        let a = Mesh::for_model(ManifoldModel::plane(1).unwrap(), 0.1, 5.0).unwrap();
        let b = Mesh::for_model(ManifoldModel::plane(1).unwrap(), 0.2, 5.0).unwrap();
        let f = a.constant_field(1.0);
        assert!(matches!(integrate(&b, &f), Err(Error::GridMismatch)));
    }

    #[test]
    fn growth_exponents() {
        let plane = Mesh::for_model(ManifoldModel::plane(2).unwrap(), 0.1, 20.0).unwrap();
        let g = growth_diagnostic(&plane, &[4.0, 8.0, 16.0]).unwrap();
        assert!((g.volume_exponent - 2.0).abs() < 0.02, "{}", g.volume_exponent);
        assert!(g.volumes_monotone);

        let cyl = Mesh::for_model(ManifoldModel::cylinder(1, 2).unwrap(), 0.05, 40.0).unwrap();
        let g = growth_diagnostic(&cyl, &[10.0, 20.0, 40.0]).unwrap();
        assert!((g.volume_exponent - 1.0).abs() < 0.02, "{}", g.volume_exponent);
        assert!(g.curvature_exponent.abs() < 1e-12);
        assert_abs_diff_eq!(g.curvature_constant, 1.0 / 2f64.sqrt(), epsilon = 1e-12);

        let sph = Mesh::for_model(ManifoldModel::sphere(2).unwrap(), 0.1, 10.0).unwrap();
        let g = growth_diagnostic(&sph, &[3.0, 5.0, 9.0]).unwrap();
        assert!(g.volumes.windows(2).all(|w| w[0] == w[1]));
        assert!(matches!(growth_diagnostic(&sph, &[3.0, 5.0]), Err(Error::InsufficientRadii(2))));
    }
}

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::DVector;
use proptest::prelude::*;

use shrinklsi_core::abp::{assemble, discounted_solve, DriftOperator, PecletPolicy, SolverOptions};
use shrinklsi_core::entropy::{mu_estimate, MuOptions, TestFamily};
use shrinklsi_core::io::{read_field_csv, write_field_csv};
use shrinklsi_core::lsi::{deficit, gaussian_form_deficit, DeficitOptions};
use shrinklsi_core::measure::{bump, integrate_weighted, normalize, CanonicalDensity, Weight};
use shrinklsi_core::transport::{det_bound, jacobian_sample, TransportInput};
use shrinklsi_core::{frame_at, shrinker_residual, DiscreteField, ManifoldModel, Mesh, StencilOrder};

fn line() -> &'static Mesh {
    static M: OnceLock<Mesh> = OnceLock::new();
    M.get_or_init(|| Mesh::for_model(ManifoldModel::plane(1).unwrap(), 0.05, 16.0).unwrap())
}

fn short_line() -> &'static Mesh {
    static M: OnceLock<Mesh> = OnceLock::new();
    M.get_or_init(|| Mesh::for_model(ManifoldModel::plane(1).unwrap(), 0.1, 10.0).unwrap())
}

fn cylinder() -> &'static Mesh {
    static M: OnceLock<Mesh> = OnceLock::new();
    M.get_or_init(|| Mesh::for_model(ManifoldModel::cylinder(1, 2).unwrap(), 0.15, 6.0).unwrap())
}

fn circle() -> &'static Mesh {
    static M: OnceLock<Mesh> = OnceLock::new();
    M.get_or_init(|| Mesh::for_model(ManifoldModel::circle(2f64.sqrt()).unwrap(), 0.05, 3.0).unwrap())
}

fn builtin_shrinkers() -> Vec<ManifoldModel> {
    vec![
        ManifoldModel::plane_in(2, 1).unwrap(),
        ManifoldModel::sphere(1).unwrap(),
        ManifoldModel::sphere(2).unwrap(),
        ManifoldModel::cylinder(1, 2).unwrap(),
        ManifoldModel::cylinder(2, 3).unwrap(),
        ManifoldModel::shrinking_torus().unwrap(),
    ]
}

/// Two-component Gaussian mixture on the line, normalized in `dvol`.
fn mixture(mesh: &Mesh, m1: f64, s1: f64, m2: f64, s2: f64, w: f64) -> DiscreteField {
    let raw = mesh.field_from_fn(|fr| {
        let x = fr.position[0];
        w * (-(x - m1).powi(2) / (2.0 * s1)).exp() / s1.sqrt() + (1.0 - w) * (-(x - m2).powi(2) / (2.0 * s2)).exp() / s2.sqrt()
    });
    normalize(mesh, &raw, Weight::Volume).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn builtins_satisfy_the_shrinker_equation(which in 0usize..6, u in prop::collection::vec(0.02f64..0.98, 3)) {
        let model = &builtin_shrinkers()[which];
        let param: Vec<f64> = model
            .param_axes()
            .iter()
            .zip(&u)
            .map(|(ax, t)| {
                let (lo, hi) = if ax.lo.is_finite() && ax.hi.is_finite() { (ax.lo, ax.hi) } else { (-4.0, 4.0) };
                lo + t * (hi - lo)
            })
            .collect();
        let res = shrinker_residual(model, &param).unwrap();
        prop_assert!(res.amax() < 1e-12, "{} at {:?}: {}", model.name(), param, res.amax());
        prop_assert!(frame_at(model, &param).unwrap().invariant_residual() < 1e-12);
    }

    #[test]
    fn normalize_gives_unit_mass(scale in 0.01f64..100.0, shift in -2.0f64..2.0, gaussian in any::<bool>()) {
        let mesh = cylinder();
        let f = mesh.field_from_fn(|fr| scale * (-(fr.position[2] - shift).powi(2)).exp());
        let weight = if gaussian { Weight::Gaussian } else { Weight::Volume };
        let g = normalize(mesh, &f, weight).unwrap();
        prop_assert!((integrate_weighted(mesh, &g, weight).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_sobolev_deficit_is_nonnegative(m1 in -2.0f64..2.0, s1 in 0.3f64..3.0, m2 in -2.0f64..2.0, s2 in 0.3f64..3.0, w in 0.0f64..1.0) {
        let mesh = line();
        let f = mixture(mesh, m1, s1, m2, s2, w);
        let r = deficit(mesh, &f, 1.0, &DeficitOptions { stencil: StencilOrder(6), ..Default::default() }).unwrap();
        prop_assert!(r.deficit >= -1e-6, "{}", r.deficit);
        prop_assert!(r.jensen_correction <= 1e-12);
        prop_assert!((r.gaussian_form.unwrap() - r.deficit).abs() < 1e-5);
    }

    #[test]
    fn gaussian_form_is_homogeneous(k in 0.05f64..20.0, a in -1.0f64..1.0) {
        let mesh = circle();
        let phi = mesh.field_from_fn(|fr| (a * fr.position[0]).exp());
        let d1 = gaussian_form_deficit(mesh, &phi, &Default::default()).unwrap();
        let dk = gaussian_form_deficit(mesh, &phi.scaled(mesh, k), &Default::default()).unwrap();
        prop_assert!((dk - k * d1).abs() <= 1e-10 * (1.0 + k * d1.abs()));
    }

    #[test]
    fn operator_is_symmetric_and_kills_constants(a in -2.0f64..2.0, b in -2.0f64..2.0, c in -5.0f64..5.0) {
        let mesh = cylinder();
        let rho = CanonicalDensity::new(mesh, 1.0).unwrap().values;
        let op = DriftOperator::new(mesh, &rho, PecletPolicy::Report).unwrap();
        let u = mesh.field_from_fn(|fr| (a * fr.position[0]).sin() + fr.position[2] * b);
        let v = mesh.field_from_fn(|fr| (b * fr.position[1]).cos() * fr.position[2]);
        let (lu, lv) = (op.apply(&u.values), op.apply(&v.values));
        let mut uv = 0.0;
        let mut vu = 0.0;
        for (k, &g) in op.active.iter().enumerate() {
            uv += op.masses[k] * lu[g] * v.values[g];
            vu += op.masses[k] * lv[g] * u.values[g];
        }
        prop_assert!((uv - vu).abs() < 1e-10 * (1.0 + uv.abs()));
        prop_assert!(op.apply(&mesh.constant_field(c).values).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn discount_bound_and_comparison(eps in 0.05f64..2.0, center in -1.0f64..1.0, width in 1.0f64..2.5, delta_exp in 0i32..12, lift in 0.0f64..0.5) {
        let mesh = short_line();
        let f = normalize(mesh, &bump(mesh, &[center], width), Weight::Volume).unwrap();
        let opts = SolverOptions::default();
        let (_, op, src) = assemble(mesh, &f, eps, 1.0, &opts).unwrap();
        let delta = 0.5f64.powi(delta_exp);
        let a = discounted_solve(mesh, &op, &src, delta, &opts).unwrap();
        prop_assert!(a.sup_norm <= a.bound + 1e-8 + 4.0 * f64::EPSILON * a.bound);
        let mut bigger = src.clone();
        bigger.values = src.values.map(mesh, |v| v + lift);
        bigger.sup_norm = bigger.values.sup_norm();
        let b = discounted_solve(mesh, &op, &bigger, delta, &opts).unwrap();
        let slack = 1e-9 * a.bound;
        prop_assert!(mesh.active_nodes().all(|i| a.values.values[i] <= b.values.values[i] + slack));
    }

    #[test]
    fn bound_depends_exponentially_on_alpha(shift in -1.0f64..1.0, node_frac in 0.1f64..0.9) {
        let mesh = cylinder();
        let f0 = CanonicalDensity::new(mesh, 1.0).unwrap();
        let zero = mesh.constant_field(0.0);
        let interior: Vec<usize> = mesh.active_nodes().filter(|&i| mesh.is_interior(i)).collect();
        let node = interior[(node_frac * interior.len() as f64) as usize];
        let y = mesh.frame(node).x_nor.normalize() * 0.3;
        let base = TransportInput { density: &f0.values, w: &zero, alpha: f0.alpha_tau, stencil: StencilOrder::default() };
        let moved = TransportInput { alpha: f0.alpha_tau + shift, ..base };
        let s0 = jacobian_sample(mesh, &base, node, &y).unwrap();
        let s1 = jacobian_sample(mesh, &moved, node, &y).unwrap();
        prop_assert!((s1.bound / s0.bound - shift.exp()).abs() < 1e-13 * shift.exp());
        let fr = mesh.frame(node);
        let direct = det_bound(f0.values.values[node], &(&fr.x_tan + &y), &fr.mean_curvature, &y, &fr.shrinker_vector(), f0.alpha_tau, 2);
        prop_assert!((direct - s0.bound).abs() < 1e-6 * s0.bound);
    }

    #[test]
    fn custom_families_respect_the_entropy_bound(a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mesh = circle();
        let basis = vec![mesh.field_from_fn(|fr| (a * fr.position[0] + b * fr.position[1]).sin()).values];
        let family = TestFamily::Custom { name: "sine".into(), basis };
        let opts = MuOptions { coarse_points: 5, refine_tol: 1e-3, ..Default::default() };
        let r = mu_estimate(mesh, &family, &opts).unwrap();
        prop_assert!(r.gap >= -1e-6);
        prop_assert!(r.normalization_error < 1e-10);
        prop_assert!(r.mu_hat <= 1e-12);
    }

    #[test]
    fn csv_round_trip(seed in any::<u64>()) {
        let mesh = cylinder();
        let f = mesh.field_from_fn(|fr| ((seed % 1000) as f64 * 1e-3 + fr.position[0] * PI).sin() * 1e-7 + fr.position[2]);
        let mut buf = Vec::new();
        write_field_csv(mesh, &f, &mut buf).unwrap();
        prop_assert_eq!(read_field_csv(mesh, buf.as_slice()).unwrap().values, f.values);
    }
}

#[test]
fn bound_is_tight_for_the_canonical_pair_at_the_origin() {
    let mesh = line();
    let f0 = CanonicalDensity::new(mesh, 1.0).unwrap();
    let zero = mesh.constant_field(0.0);
    let input = TransportInput { density: &f0.values, w: &zero, alpha: f0.alpha_tau, stencil: StencilOrder::default() };
    let origin = shrinklsi_core::stencil::locate_node(mesh, &[0.0]).unwrap();
    let s = jacobian_sample(mesh, &input, origin, &DVector::zeros(1)).unwrap();
    assert!((s.det - s.bound).abs() < 1e-10);
}

//! Finite-difference derivatives of nodal fields in chart coordinates:
//! tangential gradients and covariant Hessians.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DiscreteField, Mesh};

/// Central first-derivative weights for offsets `1..=p/2` (antisymmetric).
fn first_weights(order: usize) -> &'static [f64] {
    match order {
        2 => &[0.5],
        4 => &[2.0 / 3.0, -1.0 / 12.0],
        _ => &[0.75, -0.15, 1.0 / 60.0],
    }
}

/// Central second-derivative weights: centre, then offsets `1..=p/2` (symmetric).
fn second_weights(order: usize) -> (f64, &'static [f64]) {
    match order {
        2 => (-2.0, &[1.0]),
        4 => (-2.5, &[4.0 / 3.0, -1.0 / 12.0]),
        _ => (-49.0 / 18.0, &[1.5, -0.15, 1.0 / 90.0]),
    }
}

/// Interior order of the difference stencils. Lower orders are used
/// automatically where the grid runs out of neighbours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StencilOrder(pub usize);

impl Default for StencilOrder {
    fn default() -> Self {
        StencilOrder(4)
    }
}

impl StencilOrder {
    pub fn new(order: usize) -> Result<Self> {
        if matches!(order, 2 | 4 | 6) {
            Ok(Self(order))
        } else {
            Err(Error::InvalidGrid(format!("stencil order must be 2, 4 or 6, got {order}")))
        }
    }
}

fn steps(mesh: &Mesh, node: usize, axis: usize, half: usize) -> Option<(Vec<usize>, Vec<usize>)> {
    let mut plus = Vec::with_capacity(half);
    let mut minus = Vec::with_capacity(half);
    for k in 1..=half as i64 {
        plus.push(mesh.neighbor(node, axis, k)?);
        minus.push(mesh.neighbor(node, axis, -k)?);
    }
    Some((plus, minus))
}

/// `∂_axis u` at a node and whether a one-sided stencil had to be used.
pub fn partial(mesh: &Mesh, u: &[f64], node: usize, axis: usize, order: StencilOrder) -> Option<(f64, bool)> {
    let h = mesh.spacing(axis);
    let mut p = order.0;
    while p >= 2 {
        if let Some((plus, minus)) = steps(mesh, node, axis, p / 2) {
            let w = first_weights(p);
            let d: f64 = w.iter().zip(plus.iter().zip(&minus)).map(|(c, (&a, &b))| c * (u[a] - u[b])).sum();
            return Some((d / h, false));
        }
        p -= 2;
    }
    // second-order one-sided
    for dir in [1i64, -1] {
        if let (Some(a), Some(b)) = (mesh.neighbor(node, axis, dir), mesh.neighbor(node, axis, 2 * dir)) {
            let d = (-3.0 * u[node] + 4.0 * u[a] - u[b]) / (2.0 * h) * dir as f64;
            return Some((d, true));
        }
    }
    None
}

/// Tangential gradient: chart partials, their raised components `g^{-1} ∂u`
/// and the ambient representative.
#[derive(Debug, Clone)]
pub struct Gradient {
    pub partials: DVector<f64>,
    pub chart: DVector<f64>,
    pub ambient: DVector<f64>,
    /// A one-sided stencil was used on at least one axis.
    pub one_sided: bool,
}

/// Chart partials at a node, `None` if some axis has fewer than two
/// active neighbours in either direction.
pub fn partials(mesh: &Mesh, u: &[f64], node: usize, order: StencilOrder) -> Option<(DVector<f64>, bool)> {
    let mut out = DVector::zeros(mesh.dim());
    let mut one_sided = false;
    for a in 0..mesh.dim() {
        let (d, os) = partial(mesh, u, node, a, order)?;
        out[a] = d;
        one_sided |= os;
    }
    Some((out, one_sided))
}

/// Gradient of `field` at `node`.
pub fn tangential_gradient(mesh: &Mesh, field: &DiscreteField, node: usize, order: StencilOrder) -> Result<Gradient> {
    mesh.check_field(field)?;
    if !mesh.is_active(node) {
        return Err(Error::OutOfChart { param: mesh.param(node) });
    }
    let (p, one_sided) = partials(mesh, &field.values, node, order)
        .ok_or_else(|| Error::InvalidGrid("node has too few neighbours for a gradient".into()))?;
    let frame = mesh.frame(node);
    let chart = frame.raise(&p);
    let ambient = &frame.tangent_basis * &chart;
    Ok(Gradient { partials: p, chart, ambient, one_sided })
}

/// Gradient at the grid node located at `param`.
pub fn tangential_gradient_at(mesh: &Mesh, field: &DiscreteField, param: &[f64], order: StencilOrder) -> Result<Gradient> {
    let node = locate_node(mesh, param)?;
    tangential_gradient(mesh, field, node, order)
}

/// Grid node whose parameter coincides with `param` (to 1e-9 of the spacing).
pub fn locate_node(mesh: &Mesh, param: &[f64]) -> Result<usize> {
    let grid = mesh.grid();
    if param.len() != grid.dim() {
        return Err(Error::OutOfChart { param: param.to_vec() });
    }
    let mut idx = Vec::with_capacity(grid.dim());
    for (a, &p) in grid.axes.iter().zip(param) {
        let h = a.spacing();
        let offset = match a.kind {
            crate::grid::AxisKind::Polar { .. } => 0.5,
            _ => 0.0,
        };
        let mut s = (p - a.lo) / h - offset;
        if a.kind == crate::grid::AxisKind::Periodic {
            s = s.rem_euclid(a.nodes as f64);
        }
        let i = s.round();
        if (s - i).abs() > 1e-9 || i < 0.0 {
            return Err(Error::OffGrid { param: param.to_vec() });
        }
        let i = if a.kind == crate::grid::AxisKind::Periodic { i as usize % a.nodes } else { i as usize };
        if i >= a.nodes {
            return Err(Error::OutOfChart { param: param.to_vec() });
        }
        idx.push(i);
    }
    let node = mesh.node_at(&idx);
    if !mesh.is_active(node) {
        return Err(Error::OutOfChart { param: param.to_vec() });
    }
    Ok(node)
}

/// Chart partials on every node (`None` where no stencil exists).
pub fn all_partials(mesh: &Mesh, u: &[f64], order: StencilOrder) -> Vec<Option<(DVector<f64>, bool)>> {
    (0..mesh.len())
        .into_par_iter()
        .map(|i| if mesh.is_active(i) { partials(mesh, u, i, order) } else { None })
        .collect()
}

/// `|∇u|²` on every active node; zero where no stencil exists.
pub fn gradient_norm_sq(mesh: &Mesh, u: &[f64], order: StencilOrder) -> Vec<f64> {
    all_partials(mesh, u, order)
        .into_iter()
        .enumerate()
        .map(|(i, p)| p.map_or(0.0, |(d, _)| mesh.frame(i).norm_sq_covector(&d)))
        .collect()
}

/// Chart Hessian `∂_i ∂_j u` with central stencils only; `None` near a boundary.
pub fn chart_hessian(mesh: &Mesh, u: &[f64], node: usize, order: StencilOrder) -> Option<DMatrix<f64>> {
    let n = mesh.dim();
    let mut hess = DMatrix::zeros(n, n);
    for a in 0..n {
        let ha = mesh.spacing(a);
        let mut p = order.0;
        let val = loop {
            if p < 2 {
                return None;
            }
            if let Some((plus, minus)) = steps(mesh, node, a, p / 2) {
                let (c0, w) = second_weights(p);
                let s: f64 = w.iter().zip(plus.iter().zip(&minus)).map(|(c, (&x, &y))| c * (u[x] + u[y])).sum();
                break (c0 * u[node] + s) / (ha * ha);
            }
            p -= 2;
        };
        hess[(a, a)] = val;
        for b in 0..a {
            let hb = mesh.spacing(b);
            let mut p = order.0;
            let val = loop {
                if p < 2 {
                    return None;
                }
                if let Some(v) = mixed(mesh, u, node, a, b, p) {
                    break v / (ha * hb);
                }
                p -= 2;
            };
            hess[(a, b)] = val;
            hess[(b, a)] = val;
        }
    }
    Some(hess)
}

fn mixed(mesh: &Mesh, u: &[f64], node: usize, a: usize, b: usize, p: usize) -> Option<f64> {
    let w = first_weights(p);
    let mut acc = 0.0;
    for (i, ci) in w.iter().enumerate() {
        for sa in [1i64, -1] {
            let na = mesh.neighbor(node, a, sa * (i as i64 + 1))?;
            for (j, cj) in w.iter().enumerate() {
                for sb in [1i64, -1] {
                    let nb = mesh.neighbor(na, b, sb * (j as i64 + 1))?;
                    acc += ci * cj * (sa * sb) as f64 * u[nb];
                }
            }
        }
    }
    Some(acc)
}

/// Covariant Hessian `∇²u_ij = ∂_i∂_j u − Γ^k_ij ∂_k u` (lower indices).
pub fn covariant_hessian(mesh: &Mesh, u: &[f64], node: usize, order: StencilOrder) -> Option<DMatrix<f64>> {
    let mut hess = chart_hessian(mesh, u, node, order)?;
    let (d, one_sided) = partials(mesh, u, node, order)?;
    if one_sided {
        return None;
    }
    let frame = mesh.frame(node);
    let n = mesh.dim();
    for i in 0..n {
        for j in 0..n {
            hess[(i, j)] -= (0..n).map(|k| frame.christoffel_at(k, i, j) * d[k]).sum::<f64>();
        }
    }
    Some(hess)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ManifoldModel;
    use crate::measure::CanonicalDensity;
    use approx::assert_abs_diff_eq;

    #[test]
    fn constant_field_has_zero_gradient() {
        let mesh = Mesh::for_model(ManifoldModel::cylinder(1, 2).unwrap(), 0.2, 6.0).unwrap();
        let c = mesh.constant_field(3.5);
        for node in mesh.active_nodes() {
            let g = tangential_gradient(&mesh, &c, node, StencilOrder::default()).unwrap();
            assert_eq!(g.ambient.amax(), 0.0);
        }
    }

    #[test]
    fn gradient_of_u0_is_tangential_position() {
        let mesh = Mesh::for_model(ManifoldModel::plane(2).unwrap(), 0.25, 5.0).unwrap();
        let u0 = CanonicalDensity::u0(&mesh);
        for node in mesh.active_nodes().filter(|&i| mesh.is_interior(i)) {
            let g = tangential_gradient(&mesh, &u0, node, StencilOrder(2)).unwrap();
            assert_abs_diff_eq!((&g.ambient - &mesh.frame(node).position).amax(), 0.0, epsilon = 1e-12);
        }

        let mesh = Mesh::for_model(ManifoldModel::cylinder(1, 2).unwrap(), 0.1, 6.0).unwrap();
        let u0 = CanonicalDensity::u0(&mesh);
        let node = mesh.active_nodes().find(|&i| mesh.is_interior(i) && mesh.param(i)[1] > 1.0).unwrap();
        let p = mesh.param(node);
        let g = tangential_gradient_at(&mesh, &u0, &p, StencilOrder(2)).unwrap();
        assert_abs_diff_eq!(g.ambient[0], 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(g.ambient[1], 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(g.ambient[2], p[1], epsilon = 1e-10);
        let off = [p[0] + 0.3 * mesh.spacing(0), p[1]];
        assert!(matches!(tangential_gradient_at(&mesh, &u0, &off, StencilOrder(2)), Err(Error::OffGrid { .. })));
    }

    #[test]
    fn boundary_uses_one_sided_stencil() {
        let mesh = Mesh::for_model(ManifoldModel::plane(1).unwrap(), 0.1, 3.0).unwrap();
        let u = mesh.field_from_fn(|f| f.position[0].powi(2));
        let g = tangential_gradient(&mesh, &u, 0, StencilOrder(4)).unwrap();
        assert!(g.one_sided);
        assert_abs_diff_eq!(g.chart[0], -6.0, epsilon = 1e-9);
    }

    #[test]
    fn orders_converge() {
        // error of d/dx sin x at spacing h scales like h^p
        for p in [2usize, 4, 6] {
            let err = |h: f64| {
                let mesh = Mesh::for_model(ManifoldModel::plane(1).unwrap(), h, 4.0).unwrap();
                let u = mesh.field_from_fn(|f| f.position[0].sin());
                let node = locate_node(&mesh, &[0.5]).unwrap();
                let (d, _) = partial(&mesh, &u.values, node, 0, StencilOrder(p)).unwrap();
                (d - 0.5f64.cos()).abs()
            };
            let ratio = err(0.1) / err(0.05);
            let expect = 2f64.powi(p as i32);
            assert!((ratio / expect - 1.0).abs() < 0.1, "p={p} ratio={ratio}");
        }
    }

    #[test]
    fn covariant_hessian_on_sphere() {
        let mesh = Mesh::for_model(ManifoldModel::sphere(2).unwrap(), 0.05, 10.0).unwrap();
        let u0 = CanonicalDensity::u0(&mesh);
        // u0 is constant on the sphere: its covariant Hessian vanishes
        for node in mesh.active_nodes().step_by(97) {
            let h = covariant_hessian(&mesh, &u0.values, node, StencilOrder(4)).unwrap();
            assert!(h.amax() < 1e-8, "{}", h.amax());
        }
        // height function x_1 = 2 cos θ has Hessian -x_1/4 g (eigenfunction of the sphere)
        let z = mesh.field_from_fn(|f| f.position[0]);
        for node in mesh.active_nodes().step_by(131) {
            let f = mesh.frame(node);
            let h = covariant_hessian(&mesh, &z.values, node, StencilOrder(4)).unwrap();
            let expect = &f.metric * (-f.position[0] / 4.0);
            assert!((h - expect).amax() < 1e-4);
        }
    }
}

//! Parametrized submanifolds of Euclidean space and their pointwise
//! first and second fundamental data.
//!
//! Built-in models are products of round spheres `S^k(r)` and flat factors
//! `R^d`, optionally placed in a larger ambient space. Their chart
//! derivatives are closed-form. User charts are arbitrary maps from a
//! parameter box; their derivatives come from central finite differences.
//!
//! The mean curvature convention is `H = trace_g(II)` with `II` valued in
//! the normal bundle, so a self-shrinker is exactly `H + x^perp / 2 = 0`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One factor of a product model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Factor {
    /// Round sphere `S^k(radius) ⊂ R^(k+1)` in hyperspherical coordinates.
    Sphere { k: usize, radius: f64 },
    /// Flat factor `R^d` with the identity chart.
    Flat { d: usize },
}

impl Factor {
    fn intrinsic_dim(&self) -> usize {
        match *self {
            Factor::Sphere { k, .. } => k,
            Factor::Flat { d } => d,
        }
    }

    fn ambient_dim(&self) -> usize {
        match *self {
            Factor::Sphere { k, .. } => k + 1,
            Factor::Flat { d } => d,
        }
    }
}

/// One coordinate axis of a chart's parameter box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamAxis {
    pub lo: f64,
    pub hi: f64,
    /// Periodic axes accept any value; `hi - lo` is the period.
    pub periodic: bool,
}

impl ParamAxis {
    pub fn bounded(lo: f64, hi: f64) -> Self {
        Self { lo, hi, periodic: false }
    }

    pub fn periodic(lo: f64, hi: f64) -> Self {
        Self { lo, hi, periodic: true }
    }

    fn contains(&self, p: f64) -> bool {
        self.periodic || (p >= self.lo && p <= self.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChartKind {
    AnalyticBuiltin,
    UserNumeric,
}

type ChartMap = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
struct UserChart {
    axes: Vec<ParamAxis>,
    map: ChartMap,
    /// Finite-difference step as a fraction of the parameter-box diameter.
    fd_step_rel: f64,
}

#[derive(Clone)]
enum Chart {
    Product { factors: Vec<Factor>, extra_codim: usize },
    User(UserChart),
}

/// A parametrized submanifold `Σ^n ⊂ R^(n+m)`. Immutable after construction.
#[derive(Clone)]
pub struct ManifoldModel {
    name: String,
    n: usize,
    ambient_dim: usize,
    chart: Chart,
}

impl fmt::Debug for ManifoldModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ManifoldModel")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("ambient_dim", &self.ambient_dim)
            .field("kind", &self.kind())
            .finish()
    }
}

impl ManifoldModel {
    /// Product of factors, followed by `extra_codim` ambient coordinates
    /// on which the model is identically zero.
    pub fn product(factors: Vec<Factor>, extra_codim: usize) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::InvalidModel("product needs at least one factor".into()));
        }
        for f in &factors {
            match *f {
                Factor::Sphere { k, radius } => {
                    if k == 0 || !(radius > 0.0) {
                        return Err(Error::InvalidModel(format!(
                            "sphere factor needs k >= 1 and radius > 0, got k={k}, r={radius}"
                        )));
                    }
                }
                Factor::Flat { d } => {
                    if d == 0 {
                        return Err(Error::InvalidModel("flat factor of dimension 0".into()));
                    }
                }
            }
        }
        let n = factors.iter().map(Factor::intrinsic_dim).sum();
        let ambient_dim = factors.iter().map(Factor::ambient_dim).sum::<usize>() + extra_codim;
        let name = factors
            .iter()
            .map(|f| match *f {
                Factor::Sphere { k, radius } => format!("S^{k}({radius:.6})"),
                Factor::Flat { d } => format!("R^{d}"),
            })
            .collect::<Vec<_>>()
            .join(" x ");
        let name = if extra_codim > 0 {
            format!("{name} in R^{ambient_dim}")
        } else {
            name
        };
        Ok(Self { name, n, ambient_dim, chart: Chart::Product { factors, extra_codim } })
    }

    /// Euclidean space `R^n` as a codimension-zero submanifold of itself.
    pub fn plane(n: usize) -> Result<Self> {
        Self::product(vec![Factor::Flat { d: n }], 0)
    }

    /// `R^n ⊂ R^(n+codim)`, a flat shrinker of positive codimension.
    pub fn plane_in(n: usize, codim: usize) -> Result<Self> {
        Self::product(vec![Factor::Flat { d: n }], codim)
    }

    /// The shrinking sphere `S^n(√(2n))`.
    pub fn sphere(n: usize) -> Result<Self> {
        Self::sphere_with_radius(n, (2.0 * n as f64).sqrt())
    }

    pub fn sphere_with_radius(n: usize, radius: f64) -> Result<Self> {
        Self::product(vec![Factor::Sphere { k: n, radius }], 0)
    }

    /// The shrinking cylinder `S^k(√(2k)) × R^(n-k)`.
    pub fn cylinder(k: usize, n: usize) -> Result<Self> {
        if k == 0 || k >= n {
            return Err(Error::InvalidModel(format!("cylinder needs 1 <= k < n, got k={k}, n={n}")));
        }
        Self::product(
            vec![
                Factor::Sphere { k, radius: (2.0 * k as f64).sqrt() },
                Factor::Flat { d: n - k },
            ],
            0,
        )
    }

    /// Circle of the given radius in the plane; a shrinker only at radius √2.
    pub fn circle(radius: f64) -> Result<Self> {
        Self::sphere_with_radius(1, radius)
    }

    /// Clifford-type torus `S^1(√2) × S^1(√2) ⊂ R^4`, a compact codimension-2 shrinker.
    pub fn shrinking_torus() -> Result<Self> {
        let s = Factor::Sphere { k: 1, radius: 2f64.sqrt() };
        Self::product(vec![s, s], 0)
    }

    /// A user-supplied, twice differentiable chart.
    pub fn user<F>(
        name: impl Into<String>,
        axes: Vec<ParamAxis>,
        ambient_dim: usize,
        fd_step_rel: f64,
        map: F,
    ) -> Result<Self>
    where
        F: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        let n = axes.len();
        if n == 0 || ambient_dim < n {
            return Err(Error::InvalidModel(format!(
                "user chart needs 1 <= n <= ambient dim, got n={n}, ambient={ambient_dim}"
            )));
        }
        if axes.iter().any(|a| !(a.hi > a.lo) || !a.lo.is_finite() || !a.hi.is_finite()) {
            return Err(Error::InvalidModel("user chart parameter box must be finite and non-empty".into()));
        }
        if !(fd_step_rel > 0.0) {
            return Err(Error::InvalidModel("finite-difference step must be positive".into()));
        }
        Ok(Self {
            name: name.into(),
            n,
            ambient_dim,
            chart: Chart::User(UserChart { axes, map: Arc::new(map), fd_step_rel }),
        })
    }

    /// A user chart given by positions sampled on a tensor grid of
    /// parameters; evaluated by tensor-product cubic Lagrange interpolation.
    ///
    /// `positions` is node-major with axis 0 fastest, `ambient_dim` values
    /// per node.
    pub fn tabulated(
        name: impl Into<String>,
        axes: Vec<ParamAxis>,
        counts: Vec<usize>,
        ambient_dim: usize,
        positions: Vec<f64>,
        fd_step_rel: f64,
    ) -> Result<Self> {
        let table = Table::new(axes.clone(), counts, ambient_dim, positions)?;
        Self::user(name, axes, ambient_dim, fd_step_rel, move |p| table.eval(p))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Intrinsic dimension `n`.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    /// Codimension `m`.
    pub fn codim(&self) -> usize {
        self.ambient_dim - self.n
    }

    pub fn kind(&self) -> ChartKind {
        match self.chart {
            Chart::Product { .. } => ChartKind::AnalyticBuiltin,
            Chart::User(_) => ChartKind::UserNumeric,
        }
    }

    pub fn factors(&self) -> Option<&[Factor]> {
        match &self.chart {
            Chart::Product { factors, .. } => Some(factors),
            Chart::User(_) => None,
        }
    }

    /// True for built-ins whose sphere factors all have the shrinker radius `√(2k)`.
    pub fn is_builtin_shrinker(&self) -> bool {
        match &self.chart {
            Chart::Product { factors, .. } => factors.iter().all(|f| match *f {
                Factor::Sphere { k, radius } => (radius - (2.0 * k as f64).sqrt()).abs() <= 1e-12 * radius,
                Factor::Flat { .. } => true,
            }),
            Chart::User(_) => false,
        }
    }

    /// True when the model is bounded in the ambient space.
    pub fn is_compact(&self) -> bool {
        match &self.chart {
            Chart::Product { factors, .. } => factors.iter().all(|f| matches!(f, Factor::Sphere { .. })),
            Chart::User(_) => true,
        }
    }

    /// Parameter box of the chart.
    pub fn param_axes(&self) -> Vec<ParamAxis> {
        match &self.chart {
            Chart::Product { factors, .. } => {
                let mut axes = Vec::with_capacity(self.n);
                for f in factors {
                    match *f {
                        Factor::Sphere { k, .. } => {
                            for _ in 1..k {
                                axes.push(ParamAxis::bounded(0.0, PI));
                            }
                            axes.push(ParamAxis::periodic(0.0, 2.0 * PI));
                        }
                        Factor::Flat { d } => {
                            for _ in 0..d {
                                axes.push(ParamAxis::bounded(f64::NEG_INFINITY, f64::INFINITY));
                            }
                        }
                    }
                }
                axes
            }
            Chart::User(u) => u.axes.clone(),
        }
    }

    /// Position of the chart at `param`.
    pub fn position(&self, param: &[f64]) -> Result<DVector<f64>> {
        self.check_param(param)?;
        Ok(match &self.chart {
            Chart::Product { factors, extra_codim } => product_jet(factors, *extra_codim, self.ambient_dim, param, false).0,
            Chart::User(u) => DVector::from_vec((u.map)(param)),
        })
    }

    fn check_param(&self, param: &[f64]) -> Result<()> {
        if param.len() != self.n || param.iter().any(|p| !p.is_finite()) {
            return Err(Error::OutOfChart { param: param.to_vec() });
        }
        let axes = self.param_axes();
        if axes.iter().zip(param).all(|(a, &p)| a.contains(p)) {
            Ok(())
        } else {
            Err(Error::OutOfChart { param: param.to_vec() })
        }
    }

    /// Position, first and second chart derivatives at `param`.
    fn jet(&self, param: &[f64]) -> Result<Jet> {
        self.check_param(param)?;
        match &self.chart {
            Chart::Product { factors, extra_codim } => {
                let (x, d1, d2) = product_jet(factors, *extra_codim, self.ambient_dim, param, true);
                Ok(Jet { x, d1, d2 })
            }
            Chart::User(u) => Ok(user_jet(u, self.n, param)),
        }
    }
}

struct Jet {
    x: DVector<f64>,
    d1: Vec<DVector<f64>>,
    /// Row-major `n × n`.
    d2: Vec<DVector<f64>>,
}

#[derive(Clone, Copy)]
enum Trig {
    Sin,
    Cos,
}

impl Trig {
    fn eval(self, t: f64, order: usize) -> f64 {
        // derivatives cycle sin -> cos -> -sin -> -cos
        let (s, c) = t.sin_cos();
        match (self, order % 4) {
            (Trig::Sin, 0) | (Trig::Cos, 3) => s,
            (Trig::Sin, 1) | (Trig::Cos, 0) => c,
            (Trig::Sin, 2) | (Trig::Cos, 1) => -s,
            (Trig::Sin, 3) | (Trig::Cos, 2) => -c,
            _ => unreachable!(),
        }
    }
}

fn product_jet(
    factors: &[Factor],
    extra_codim: usize,
    ambient_dim: usize,
    param: &[f64],
    derivatives: bool,
) -> (DVector<f64>, Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let n = param.len();
    let mut x = DVector::zeros(ambient_dim);
    let mut d1 = if derivatives { vec![DVector::zeros(ambient_dim); n] } else { Vec::new() };
    let mut d2 = if derivatives { vec![DVector::zeros(ambient_dim); n * n] } else { Vec::new() };
    let (mut p0, mut a0) = (0usize, 0usize);
    for f in factors {
        match *f {
            Factor::Flat { d } => {
                for i in 0..d {
                    x[a0 + i] = param[p0 + i];
                    if derivatives {
                        d1[p0 + i][a0 + i] = 1.0;
                    }
                }
            }
            Factor::Sphere { k, radius } => {
                // x_j = r * prod_{i<j} sin θ_i * (cos θ_j if j < k)
                for j in 0..=k {
                    let mut terms: Vec<(usize, Trig)> = (0..j.min(k)).map(|i| (i, Trig::Sin)).collect();
                    if j < k {
                        terms.push((j, Trig::Cos));
                    }
                    let value = |orders: &dyn Fn(usize) -> usize| -> f64 {
                        radius
                            * terms
                                .iter()
                                .map(|&(i, t)| t.eval(param[p0 + i], orders(i)))
                                .product::<f64>()
                    };
                    x[a0 + j] = value(&|_| 0);
                    if !derivatives {
                        continue;
                    }
                    for &(p, _) in &terms {
                        d1[p0 + p][a0 + j] = value(&|i| usize::from(i == p));
                        for &(q, _) in &terms {
                            let v = value(&|i| usize::from(i == p) + usize::from(i == q));
                            d2[(p0 + p) * n + (p0 + q)][a0 + j] = v;
                        }
                    }
                }
            }
        }
        p0 += f.intrinsic_dim();
        a0 += f.ambient_dim();
    }
    debug_assert_eq!(a0 + extra_codim, ambient_dim);
    (x, d1, d2)
}

fn user_jet(u: &UserChart, n: usize, param: &[f64]) -> Jet {
    let diam = u.axes.iter().map(|a| (a.hi - a.lo).powi(2)).sum::<f64>().sqrt();
    let h = u.fd_step_rel * diam;
    let eval = |offsets: &[(usize, f64)]| -> DVector<f64> {
        let mut p = param.to_vec();
        for &(i, s) in offsets {
            p[i] += s * h;
        }
        DVector::from_vec((u.map)(&p))
    };
    let x = eval(&[]);
    let d1: Vec<_> = (0..n).map(|i| (eval(&[(i, 1.0)]) - eval(&[(i, -1.0)])) / (2.0 * h)).collect();
    let mut d2 = vec![DVector::zeros(x.len()); n * n];
    for i in 0..n {
        d2[i * n + i] = (eval(&[(i, 1.0)]) - &x * 2.0 + eval(&[(i, -1.0)])) / (h * h);
        for j in 0..i {
            let v = (eval(&[(i, 1.0), (j, 1.0)]) - eval(&[(i, 1.0), (j, -1.0)]) - eval(&[(i, -1.0), (j, 1.0)])
                + eval(&[(i, -1.0), (j, -1.0)]))
                / (4.0 * h * h);
            d2[i * n + j] = v.clone();
            d2[j * n + i] = v;
        }
    }
    Jet { x, d1, d2 }
}

/// Pointwise first and second fundamental data of `Σ` at one parameter.
#[derive(Debug, Clone)]
pub struct GeometryFrame {
    pub param: Vec<f64>,
    pub position: DVector<f64>,
    /// Columns are the coordinate tangent vectors `∂_i x`.
    pub tangent_basis: DMatrix<f64>,
    pub metric: DMatrix<f64>,
    pub metric_inverse: DMatrix<f64>,
    pub sqrt_det_g: f64,
    pub x_tan: DVector<f64>,
    pub x_nor: DVector<f64>,
    /// `II(∂_i, ∂_j)` row-major, normal-valued.
    pub second_fundamental: Vec<DVector<f64>>,
    pub mean_curvature: DVector<f64>,
    /// `Γ^k_ij` stored at `[k * n * n + i * n + j]`.
    pub christoffel: Vec<f64>,
}

impl GeometryFrame {
    pub fn n(&self) -> usize {
        self.metric.nrows()
    }

    pub fn radius(&self) -> f64 {
        self.position.norm()
    }

    pub fn second_fundamental_at(&self, i: usize, j: usize) -> &DVector<f64> {
        &self.second_fundamental[i * self.n() + j]
    }

    pub fn christoffel_at(&self, k: usize, i: usize, j: usize) -> f64 {
        let n = self.n();
        self.christoffel[k * n * n + i * n + j]
    }

    /// Tangential projection of an ambient vector.
    pub fn project_tangent(&self, v: &DVector<f64>) -> DVector<f64> {
        let t = &self.tangent_basis;
        t * (&self.metric_inverse * (t.transpose() * v))
    }

    pub fn project_normal(&self, v: &DVector<f64>) -> DVector<f64> {
        v - self.project_tangent(v)
    }

    /// Raises a chart covector (partial derivatives) to chart vector components.
    pub fn raise(&self, covector: &DVector<f64>) -> DVector<f64> {
        &self.metric_inverse * covector
    }

    /// Ambient representative of the gradient whose chart partials are `covector`.
    pub fn ambient_gradient(&self, covector: &DVector<f64>) -> DVector<f64> {
        &self.tangent_basis * self.raise(covector)
    }

    /// `|∇f|^2 = ∂f^T g^{-1} ∂f`.
    pub fn norm_sq_covector(&self, covector: &DVector<f64>) -> f64 {
        covector.dot(&self.raise(covector))
    }

    /// `H + x^perp / 2`; zero on a self-shrinker.
    pub fn shrinker_vector(&self) -> DVector<f64> {
        &self.mean_curvature + &self.x_nor * 0.5
    }

    /// `H + x^perp / (2τ)`.
    pub fn shrinker_vector_tau(&self, tau: f64) -> DVector<f64> {
        &self.mean_curvature + &self.x_nor / (2.0 * tau)
    }

    /// Largest violation of the frame invariants: decomposition of `x`,
    /// orthogonality of `x^T` and `x^perp`, normality of `H`, and
    /// `trace_g II = H`.
    pub fn invariant_residual(&self) -> f64 {
        let n = self.n();
        let decomposition = (&self.x_tan + &self.x_nor - &self.position).amax();
        let orthogonal = self.x_tan.dot(&self.x_nor).abs();
        let h_tangential = self.project_tangent(&self.mean_curvature).amax();
        let mut trace = DVector::zeros(self.position.len());
        for i in 0..n {
            for j in 0..n {
                trace += self.second_fundamental_at(i, j) * self.metric_inverse[(i, j)];
            }
        }
        let trace_res = (trace - &self.mean_curvature).amax();
        decomposition.max(orthogonal).max(h_tangential).max(trace_res)
    }
}

/// Geometry at `param`: metric, projections, second fundamental form and
/// mean curvature. Closed-form derivatives for built-ins, central finite
/// differences for user charts.
pub fn frame_at(model: &ManifoldModel, param: &[f64]) -> Result<GeometryFrame> {
    let jet = model.jet(param)?;
    frame_from_jet(param, jet)
}

fn frame_from_jet(param: &[f64], jet: Jet) -> Result<GeometryFrame> {
    let n = jet.d1.len();
    let dim = jet.x.len();
    let t = DMatrix::from_columns(&jet.d1);
    let g = t.transpose() * &t;
    let eig = g.clone().symmetric_eigen();
    let max_eig = eig.eigenvalues.max();
    let min_eig = eig.eigenvalues.min();
    if !(min_eig > 1e-12 * max_eig.max(1.0)) {
        return Err(Error::RankDeficientChart { param: param.to_vec(), min_eig });
    }
    let g_inv = g
        .clone()
        .cholesky()
        .ok_or_else(|| Error::RankDeficientChart { param: param.to_vec(), min_eig })?
        .inverse();
    let sqrt_det_g = g.determinant().sqrt();
    let tangent = |v: &DVector<f64>| &t * (&g_inv * (t.transpose() * v));
    let x_tan = tangent(&jet.x);
    let x_nor = &jet.x - &x_tan;
    let second_fundamental: Vec<DVector<f64>> = jet.d2.iter().map(|v| v - tangent(v)).collect();
    let mut mean_curvature = DVector::zeros(dim);
    for i in 0..n {
        for j in 0..n {
            mean_curvature += &second_fundamental[i * n + j] * g_inv[(i, j)];
        }
    }
    let mut christoffel = vec![0.0; n * n * n];
    for i in 0..n {
        for j in 0..n {
            let first_kind: Vec<f64> = (0..n).map(|l| jet.d2[i * n + j].dot(&jet.d1[l])).collect();
            for k in 0..n {
                christoffel[k * n * n + i * n + j] = (0..n).map(|l| g_inv[(k, l)] * first_kind[l]).sum();
            }
        }
    }
    Ok(GeometryFrame {
        param: param.to_vec(),
        position: jet.x,
        tangent_basis: t,
        metric: g,
        metric_inverse: g_inv,
        sqrt_det_g,
        x_tan,
        x_nor,
        second_fundamental,
        mean_curvature,
        christoffel,
    })
}

/// `H + x^perp / 2` at `param`; its norm is the pointwise deviation from
/// the shrinker equation.
pub fn shrinker_residual(model: &ManifoldModel, param: &[f64]) -> Result<DVector<f64>> {
    Ok(frame_at(model, param)?.shrinker_vector())
}

/// Tensor grid of sampled chart positions.
#[derive(Clone)]
struct Table {
    axes: Vec<ParamAxis>,
    counts: Vec<usize>,
    dim: usize,
    values: Vec<f64>,
}

impl Table {
    fn new(axes: Vec<ParamAxis>, counts: Vec<usize>, dim: usize, values: Vec<f64>) -> Result<Self> {
        if axes.len() != counts.len() || counts.iter().any(|&c| c < 4) {
            return Err(Error::InvalidModel("table needs >= 4 samples along every axis".into()));
        }
        let total: usize = counts.iter().product();
        if values.len() != total * dim {
            return Err(Error::InvalidModel(format!(
                "table has {} values, expected {}",
                values.len(),
                total * dim
            )));
        }
        Ok(Self { axes, counts, dim, values })
    }

    fn spacing(&self, a: usize) -> f64 {
        let ax = &self.axes[a];
        let c = self.counts[a] as f64;
        if ax.periodic {
            (ax.hi - ax.lo) / c
        } else {
            (ax.hi - ax.lo) / (c - 1.0)
        }
    }

    fn eval(&self, p: &[f64]) -> Vec<f64> {
        // per axis: 4 node indices and Lagrange weights
        let stencils: Vec<[(usize, f64); 4]> = (0..self.axes.len())
            .map(|a| {
                let ax = &self.axes[a];
                let h = self.spacing(a);
                let c = self.counts[a] as i64;
                let s = (p[a] - ax.lo) / h;
                let base = if ax.periodic { s.floor() as i64 - 1 } else { (s.floor() as i64 - 1).clamp(0, c - 4) };
                let mut out = [(0usize, 0.0); 4];
                for (m, slot) in out.iter_mut().enumerate() {
                    let node = base + m as i64;
                    let mut w = 1.0;
                    for o in 0..4 {
                        if o != m {
                            w *= (s - (base + o as i64) as f64) / (m as f64 - o as f64);
                        }
                    }
                    let idx = if ax.periodic { node.rem_euclid(c) } else { node };
                    *slot = (idx as usize, w);
                }
                out
            })
            .collect();
        let mut out = vec![0.0; self.dim];
        let na = self.axes.len();
        for combo in 0..4usize.pow(na as u32) {
            let (mut flat, mut stride, mut w, mut rem) = (0usize, 1usize, 1.0, combo);
            for (a, st) in stencils.iter().enumerate() {
                let (idx, wa) = st[rem % 4];
                rem /= 4;
                flat += idx * stride;
                stride *= self.counts[a];
                w *= wa;
            }
            for d in 0..self.dim {
                out[d] += w * self.values[flat * self.dim + d];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn plane_frame_is_flat() {
        let m = ManifoldModel::plane(2).unwrap();
        let f = frame_at(&m, &[0.3, -1.2]).unwrap();
        assert_abs_diff_eq!((&f.metric - DMatrix::identity(2, 2)).amax(), 0.0);
        assert_eq!(f.mean_curvature.amax(), 0.0);
        assert_eq!(f.x_nor.amax(), 0.0);
        assert_eq!(f.sqrt_det_g, 1.0);
    }

    #[test]
    fn cylinder_curvature_and_normal_part() {
        let m = ManifoldModel::cylinder(1, 2).unwrap();
        for &(t, z) in &[(0.0, 0.0), (1.1, 3.0), (4.0, -2.5)] {
            let f = frame_at(&m, &[t, z]).unwrap();
            assert_abs_diff_eq!(f.mean_curvature.norm(), 1.0 / 2f64.sqrt(), epsilon = 1e-14);
            let radial = DVector::from_vec(vec![t.cos(), t.sin(), 0.0]);
            assert_abs_diff_eq!((&f.x_nor - &radial * 2f64.sqrt()).amax(), 0.0, epsilon = 1e-14);
            assert_abs_diff_eq!(f.x_tan[2], z, epsilon = 1e-14);
        }
    }

    #[test]
    fn sphere_curvature() {
        let m = ManifoldModel::sphere(2).unwrap();
        let f = frame_at(&m, &[0.7, 2.0]).unwrap();
        let nu = &f.position / 2.0;
        assert_abs_diff_eq!(f.mean_curvature.norm(), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!((&f.x_nor - &nu * 2.0).amax(), 0.0, epsilon = 1e-14);
        assert!(f.invariant_residual() < 1e-13);
    }

    #[test]
    fn unit_circle_is_not_a_shrinker() {
        let m = ManifoldModel::circle(1.0).unwrap();
        let r = shrinker_residual(&m, &[0.4]).unwrap();
        assert_abs_diff_eq!(r.norm(), 0.5, epsilon = 1e-14);
        assert!(!m.is_builtin_shrinker());
    }

    #[test]
    fn pole_is_rank_deficient() {
        let m = ManifoldModel::sphere(2).unwrap();
        assert!(matches!(frame_at(&m, &[0.0, 1.0]), Err(Error::RankDeficientChart { .. })));
    }

    #[test]
    fn out_of_chart() {
        let m = ManifoldModel::sphere(2).unwrap();
        assert!(matches!(frame_at(&m, &[4.0, 1.0]), Err(Error::OutOfChart { .. })));
        assert!(matches!(frame_at(&m, &[1.0]), Err(Error::OutOfChart { .. })));
        // periodic axes take any value
        assert!(frame_at(&m, &[1.0, 40.0]).is_ok());
    }

    #[test]
    fn shrinkers_have_zero_residual() {
        let models = [
            ManifoldModel::plane(3).unwrap(),
            ManifoldModel::plane_in(2, 2).unwrap(),
            ManifoldModel::sphere(1).unwrap(),
            ManifoldModel::sphere(2).unwrap(),
            ManifoldModel::sphere(3).unwrap(),
            ManifoldModel::cylinder(1, 2).unwrap(),
            ManifoldModel::cylinder(1, 3).unwrap(),
            ManifoldModel::cylinder(2, 3).unwrap(),
            ManifoldModel::shrinking_torus().unwrap(),
        ];
        for m in &models {
            assert!(m.is_builtin_shrinker());
            let p: Vec<f64> = (0..m.n()).map(|i| 0.4 + 0.3 * i as f64).collect();
            let r = shrinker_residual(m, &p).unwrap();
            assert!(r.norm() < 1e-12, "{}: {}", m.name(), r.norm());
        }
    }

    #[test]
    fn torus_has_codim_two() {
        let m = ManifoldModel::shrinking_torus().unwrap();
        assert_eq!((m.n(), m.codim()), (2, 2));
        let f = frame_at(&m, &[0.3, 1.9]).unwrap();
        assert_abs_diff_eq!(f.mean_curvature.norm(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn user_chart_matches_builtin() {
        let r = 2f64.sqrt();
        let user = ManifoldModel::user(
            "cyl",
            vec![ParamAxis::periodic(0.0, 2.0 * PI), ParamAxis::bounded(-5.0, 5.0)],
            3,
            1e-4,
            move |p| vec![r * p[0].cos(), r * p[0].sin(), p[1]],
        )
        .unwrap();
        assert_eq!(user.kind(), ChartKind::UserNumeric);
        let a = frame_at(&user, &[0.8, 1.0]).unwrap();
        let b = frame_at(&ManifoldModel::cylinder(1, 2).unwrap(), &[0.8, 1.0]).unwrap();
        assert!((&a.mean_curvature - &b.mean_curvature).amax() < 1e-5);
        assert!((&a.metric - &b.metric).amax() < 1e-6);
    }

    #[test]
    fn tabulated_cylinder() {
        let r = 2f64.sqrt();
        let (nt, nz) = (64usize, 41usize);
        let mut pos = Vec::new();
        for j in 0..nz {
            for i in 0..nt {
                let t = 2.0 * PI * i as f64 / nt as f64;
                let z = -4.0 + 8.0 * j as f64 / (nz - 1) as f64;
                pos.extend([r * t.cos(), r * t.sin(), z]);
            }
        }
        let m = ManifoldModel::tabulated(
            "table",
            vec![ParamAxis::periodic(0.0, 2.0 * PI), ParamAxis::bounded(-4.0, 4.0)],
            vec![nt, nz],
            3,
            pos,
            1e-4,
        )
        .unwrap();
        let f = frame_at(&m, &[0.5, 0.3]).unwrap();
        assert!((f.mean_curvature.norm() - 1.0 / r).abs() < 1e-3);
    }

    #[test]
    fn covariant_hessian_of_half_norm_squared() {
        // ∇²u0 − <II, x^perp> = g: check via Christoffel symbols on the sphere
        let m = ManifoldModel::sphere(2).unwrap();
        let p = [1.0, 0.5];
        let f = frame_at(&m, &p).unwrap();
        let jet = m.jet(&p).unwrap();
        let n = 2;
        for i in 0..n {
            for j in 0..n {
                let chart_hess = jet.d1[i].dot(&jet.d1[j]) + jet.x.dot(&jet.d2[i * n + j]);
                let grad: Vec<f64> = (0..n).map(|k| jet.x.dot(&jet.d1[k])).collect();
                let cov = chart_hess - (0..n).map(|k| f.christoffel_at(k, i, j) * grad[k]).sum::<f64>();
                let lhs = cov - f.second_fundamental_at(i, j).dot(&f.x_nor);
                assert_abs_diff_eq!(lhs, f.metric[(i, j)], epsilon = 1e-13);
            }
        }
    }
}

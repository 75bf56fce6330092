//! Tensor-product chart grids, the sampled manifold built on them, and
//! scalar fields living on its nodes.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{frame_at, Factor, GeometryFrame, ManifoldModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisKind {
    /// Nodes include both ends; zero-flux ends for the drift operator.
    Bounded,
    /// `nodes` equispaced nodes on `[lo, hi)`, wrapping around.
    Periodic,
    /// Cell-centred colatitude on `[lo, hi]` whose ends are coordinate
    /// poles. Stencils crossing a pole continue on the far side, i.e. at
    /// the same colatitude with the `partner` periodic axis shifted by half
    /// a turn.
    Polar { partner: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub lo: f64,
    pub hi: f64,
    pub nodes: usize,
    pub kind: AxisKind,
}

impl AxisSpec {
    pub fn bounded(lo: f64, hi: f64, nodes: usize) -> Self {
        Self { lo, hi, nodes, kind: AxisKind::Bounded }
    }

    pub fn periodic(lo: f64, hi: f64, nodes: usize) -> Self {
        Self { lo, hi, nodes, kind: AxisKind::Periodic }
    }

    pub fn polar(nodes: usize, partner: usize) -> Self {
        Self { lo: 0.0, hi: PI, nodes, kind: AxisKind::Polar { partner } }
    }

    pub fn spacing(&self) -> f64 {
        match self.kind {
            AxisKind::Bounded => (self.hi - self.lo) / (self.nodes - 1) as f64,
            AxisKind::Periodic | AxisKind::Polar { .. } => (self.hi - self.lo) / self.nodes as f64,
        }
    }

    pub fn coordinate(&self, i: usize) -> f64 {
        let h = self.spacing();
        match self.kind {
            AxisKind::Bounded | AxisKind::Periodic => self.lo + i as f64 * h,
            AxisKind::Polar { .. } => self.lo + (i as f64 + 0.5) * h,
        }
    }

    /// One-dimensional quadrature weight of node `i`.
    pub fn weight(&self, i: usize, rule: QuadratureRule) -> f64 {
        let h = self.spacing();
        match (self.kind, rule) {
            (AxisKind::Bounded, QuadratureRule::Trapezoid) => {
                if i == 0 || i + 1 == self.nodes {
                    0.5 * h
                } else {
                    h
                }
            }
            (AxisKind::Bounded, QuadratureRule::Simpson) => {
                if i == 0 || i + 1 == self.nodes {
                    h / 3.0
                } else if i % 2 == 1 {
                    4.0 * h / 3.0
                } else {
                    2.0 * h / 3.0
                }
            }
            // periodic trapezoid and colatitude midpoint
            _ => h,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureRule {
    #[default]
    Trapezoid,
    Simpson,
}

/// Chart grid plus the ambient truncation radius beyond which nodes are cut.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: Vec<AxisSpec>,
    pub truncation_radius: f64,
    pub rule: QuadratureRule,
}

impl GridSpec {
    pub fn new(axes: Vec<AxisSpec>, truncation_radius: f64, rule: QuadratureRule) -> Result<Self> {
        let g = Self { axes, truncation_radius, rule };
        g.validate()?;
        Ok(g)
    }

    /// Default grid for a built-in model: flat axes span the truncation
    /// ball, sphere angles are resolved at roughly `spacing` ambient units.
    pub fn for_model(model: &ManifoldModel, spacing: f64, truncation_radius: f64) -> Result<Self> {
        let factors = model
            .factors()
            .ok_or_else(|| Error::InvalidGrid("user charts need an explicit grid".into()))?;
        if !(spacing > 0.0) || !(truncation_radius > 0.0) {
            return Err(Error::InvalidGrid("spacing and truncation radius must be positive".into()));
        }
        let sphere_r2: f64 = factors
            .iter()
            .map(|f| match *f {
                Factor::Sphere { radius, .. } => radius * radius,
                Factor::Flat { .. } => 0.0,
            })
            .sum();
        if sphere_r2 > truncation_radius * truncation_radius {
            return Err(Error::InvalidGrid("truncation radius does not reach the sphere factors".into()));
        }
        let flat_extent = (truncation_radius * truncation_radius - sphere_r2).sqrt();
        let mut axes = Vec::new();
        for f in factors {
            match *f {
                Factor::Sphere { k, radius } => {
                    if k > 2 {
                        return Err(Error::InvalidGrid(format!(
                            "grids on S^{k} factors are not supported (k <= 2)"
                        )));
                    }
                    let mut nphi = ((2.0 * PI * radius / spacing).round() as usize).max(8);
                    nphi += nphi % 2;
                    if k == 2 {
                        let nth = ((PI * radius / spacing).round() as usize).max(8);
                        axes.push(AxisSpec::polar(nth, axes.len() + 1));
                    }
                    axes.push(AxisSpec::periodic(0.0, 2.0 * PI, nphi));
                }
                Factor::Flat { d } => {
                    let count = ((2.0 * flat_extent / spacing).round() as usize + 1).max(8);
                    for _ in 0..d {
                        axes.push(AxisSpec::bounded(-flat_extent, flat_extent, count));
                    }
                }
            }
        }
        Self::new(axes, truncation_radius, QuadratureRule::Trapezoid)
    }

    pub fn with_rule(mut self, rule: QuadratureRule) -> Result<Self> {
        self.rule = rule;
        self.validate()?;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn node_count(&self) -> usize {
        self.axes.iter().map(|a| a.nodes).product()
    }

    /// Largest node spacing over all axes, in parameter units.
    pub fn max_spacing(&self) -> f64 {
        self.axes.iter().map(AxisSpec::spacing).fold(0.0, f64::max)
    }

    fn validate(&self) -> Result<()> {
        if self.axes.is_empty() {
            return Err(Error::InvalidGrid("grid has no axes".into()));
        }
        if !(self.truncation_radius > 0.0) {
            return Err(Error::InvalidGrid("truncation radius must be positive".into()));
        }
        for (i, a) in self.axes.iter().enumerate() {
            if a.nodes < 8 {
                return Err(Error::InvalidGrid(format!("axis {i} has {} nodes, need >= 8", a.nodes)));
            }
            if !(a.hi > a.lo) || !a.lo.is_finite() || !a.hi.is_finite() {
                return Err(Error::InvalidGrid(format!("axis {i} has an empty or infinite range")));
            }
            if self.rule == QuadratureRule::Simpson && a.kind == AxisKind::Bounded && a.nodes % 2 == 0 {
                return Err(Error::InvalidGrid(format!("Simpson needs an odd node count on axis {i}")));
            }
            if let AxisKind::Polar { partner } = a.kind {
                let ok = self
                    .axes
                    .get(partner)
                    .map(|p| p.kind == AxisKind::Periodic && p.nodes % 2 == 0 && ((p.hi - p.lo) - 2.0 * PI).abs() < 1e-12)
                    .unwrap_or(false);
                if !ok {
                    return Err(Error::InvalidGrid(format!(
                        "polar axis {i} needs a periodic 2π partner with an even node count"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A model sampled on a grid: per-node frames, quadrature weights and
/// finite-volume cell volumes. Nodes outside the truncation ball are inactive.
#[derive(Debug, Clone)]
pub struct Mesh {
    model: ManifoldModel,
    grid: GridSpec,
    strides: Vec<usize>,
    frames: Vec<Option<GeometryFrame>>,
    quad_weights: Vec<f64>,
    cell_volumes: Vec<f64>,
    interior: Vec<bool>,
    anchor: usize,
}

impl Mesh {
    pub fn new(model: ManifoldModel, grid: GridSpec) -> Result<Self> {
        grid.validate()?;
        if grid.dim() != model.n() {
            return Err(Error::InvalidGrid(format!(
                "grid has {} axes but the model has dimension {}",
                grid.dim(),
                model.n()
            )));
        }
        let chart_axes = model.param_axes();
        for (i, (a, c)) in grid.axes.iter().zip(&chart_axes).enumerate() {
            let periodic = matches!(a.kind, AxisKind::Periodic);
            if periodic && !(c.periodic && ((c.hi - c.lo) - (a.hi - a.lo)).abs() < 1e-12) {
                return Err(Error::InvalidGrid(format!("axis {i} is periodic but the chart axis is not")));
            }
            if !periodic && c.periodic {
                return Err(Error::InvalidGrid(format!("chart axis {i} is periodic; the grid axis must be too")));
            }
        }

        // periodic axes vary fastest so that wrap-around couplings stay inside a narrow band
        let mut order: Vec<usize> = (0..grid.dim()).filter(|&i| grid.axes[i].kind == AxisKind::Periodic).collect();
        order.extend((0..grid.dim()).filter(|&i| grid.axes[i].kind != AxisKind::Periodic));
        let mut strides = vec![0; grid.dim()];
        let mut s = 1;
        for &a in &order {
            strides[a] = s;
            s *= grid.axes[a].nodes;
        }

        let total = grid.node_count();
        let r_max = grid.truncation_radius;
        let frames: Vec<Option<GeometryFrame>> = (0..total)
            .into_par_iter()
            .map(|node| {
                let param: Vec<f64> = (0..grid.dim())
                    .map(|a| grid.axes[a].coordinate((node / strides[a]) % grid.axes[a].nodes))
                    .collect();
                let frame = frame_at(&model, &param)?;
                Ok((frame.radius() <= r_max * (1.0 + 1e-12)).then_some(frame))
            })
            .collect::<Result<_>>()?;

        let mut mesh = Self {
            model,
            grid,
            strides,
            frames,
            quad_weights: vec![0.0; total],
            cell_volumes: vec![0.0; total],
            interior: vec![false; total],
            anchor: 0,
        };
        for node in 0..total {
            let Some(frame) = &mesh.frames[node] else { continue };
            let idx = mesh.multi_index(node);
            let w = |rule| -> f64 {
                mesh.grid.axes.iter().zip(&idx).map(|(a, &i)| a.weight(i, rule)).product()
            };
            mesh.quad_weights[node] = w(mesh.grid.rule) * frame.sqrt_det_g;
            mesh.cell_volumes[node] = w(QuadratureRule::Trapezoid) * frame.sqrt_det_g;
        }
        mesh.interior = (0..total)
            .map(|node| {
                mesh.is_active(node)
                    && (0..mesh.dim()).all(|a| mesh.neighbor(node, a, 1).is_some() && mesh.neighbor(node, a, -1).is_some())
            })
            .collect();
        mesh.anchor = mesh
            .active_nodes()
            .min_by(|&a, &b| mesh.radius(a).total_cmp(&mesh.radius(b)))
            .ok_or_else(|| Error::InvalidGrid("no node lies inside the truncation radius".into()))?;
        Ok(mesh)
    }

    /// Convenience: built-in model on its default grid.
    pub fn for_model(model: ManifoldModel, spacing: f64, truncation_radius: f64) -> Result<Self> {
        let grid = GridSpec::for_model(&model, spacing, truncation_radius)?;
        Self::new(model, grid)
    }

    pub fn model(&self) -> &ManifoldModel {
        &self.model
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn is_active(&self, node: usize) -> bool {
        self.frames[node].is_some()
    }

    pub fn active_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&i| self.is_active(i))
    }

    pub fn active_count(&self) -> usize {
        self.frames.iter().filter(|f| f.is_some()).count()
    }

    /// Active node with all `±1` neighbours active on every axis.
    pub fn is_interior(&self, node: usize) -> bool {
        self.interior[node]
    }

    /// Frame of an active node.
    ///
    /// # Panics
    /// If the node is inactive.
    pub fn frame(&self, node: usize) -> &GeometryFrame {
        self.frames[node].as_ref().expect("inactive node has no frame")
    }

    pub fn try_frame(&self, node: usize) -> Option<&GeometryFrame> {
        self.frames[node].as_ref()
    }

    pub fn radius(&self, node: usize) -> f64 {
        self.frames[node].as_ref().map_or(f64::INFINITY, GeometryFrame::radius)
    }

    /// Quadrature weight including the area element; zero on inactive nodes.
    pub fn weight(&self, node: usize) -> f64 {
        self.quad_weights[node]
    }

    pub fn weights(&self) -> &[f64] {
        &self.quad_weights
    }

    /// Finite-volume (trapezoid) cell volume including the area element.
    pub fn cell_volume(&self, node: usize) -> f64 {
        self.cell_volumes[node]
    }

    pub fn cell_volumes(&self) -> &[f64] {
        &self.cell_volumes
    }

    /// Active node nearest the ambient origin (first in index order on ties).
    pub fn anchor(&self) -> usize {
        self.anchor
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.grid.axes[axis].spacing()
    }

    pub fn multi_index(&self, node: usize) -> Vec<usize> {
        (0..self.dim()).map(|a| (node / self.strides[a]) % self.grid.axes[a].nodes).collect()
    }

    pub fn node_at(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn param(&self, node: usize) -> Vec<f64> {
        self.multi_index(node)
            .iter()
            .zip(&self.grid.axes)
            .map(|(&i, a)| a.coordinate(i))
            .collect()
    }

    /// Node reached by `offset` steps along `axis`, following periodic
    /// wrap-around and pole reflection; `None` past a bounded end or on an
    /// inactive node.
    pub fn neighbor(&self, node: usize, axis: usize, offset: i64) -> Option<usize> {
        let mut idx = self.multi_index(node);
        let spec = &self.grid.axes[axis];
        let count = spec.nodes as i64;
        let target = idx[axis] as i64 + offset;
        match spec.kind {
            AxisKind::Bounded => {
                if !(0..count).contains(&target) {
                    return None;
                }
                idx[axis] = target as usize;
            }
            AxisKind::Periodic => idx[axis] = target.rem_euclid(count) as usize,
            AxisKind::Polar { partner } => {
                let reflected = if target < 0 {
                    -1 - target
                } else if target >= count {
                    2 * count - 1 - target
                } else {
                    target
                };
                if !(0..count).contains(&reflected) {
                    return None;
                }
                if reflected != target {
                    let np = self.grid.axes[partner].nodes;
                    idx[partner] = (idx[partner] + np / 2) % np;
                }
                idx[axis] = reflected as usize;
            }
        }
        let out = self.node_at(&idx);
        self.is_active(out).then_some(out)
    }

    /// True when the `+1` step along a polar axis crosses a pole.
    pub fn crosses_pole(&self, node: usize, axis: usize, offset: i64) -> bool {
        let spec = &self.grid.axes[axis];
        if !matches!(spec.kind, AxisKind::Polar { .. }) {
            return false;
        }
        let t = self.multi_index(node)[axis] as i64 + offset;
        t < 0 || t >= spec.nodes as i64
    }

    /// Builds a field by evaluating `f` on every active node (zero elsewhere).
    pub fn field_from_fn<F>(&self, f: F) -> DiscreteField
    where
        F: Fn(&GeometryFrame) -> f64 + Sync,
    {
        let values = (0..self.len())
            .into_par_iter()
            .map(|i| self.frames[i].as_ref().map_or(0.0, &f))
            .collect();
        DiscreteField::on(self, values)
    }

    /// Constant field on active nodes.
    pub fn constant_field(&self, c: f64) -> DiscreteField {
        self.field_from_fn(|_| c)
    }

    pub fn check_field(&self, field: &DiscreteField) -> Result<()> {
        if field.grid != self.grid || field.values.len() != self.len() || field.model_name != self.model.name() {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }
}

/// Scalar field sampled on the nodes of a mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteField {
    pub grid: GridSpec,
    pub model_name: String,
    pub values: Vec<f64>,
    /// Smallest ambient radius containing every node with a positive value.
    pub support_radius: f64,
}

impl DiscreteField {
    /// Wraps nodal values; inactive nodes are forced to zero.
    pub fn on(mesh: &Mesh, mut values: Vec<f64>) -> Self {
        assert_eq!(values.len(), mesh.len(), "field length must match the mesh");
        for (i, v) in values.iter_mut().enumerate() {
            if !mesh.is_active(i) {
                *v = 0.0;
            }
        }
        let support_radius = values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.0)
            .map(|(i, _)| mesh.radius(i))
            .fold(0.0, f64::max);
        Self {
            grid: mesh.grid.clone(),
            model_name: mesh.model.name().to_string(),
            values,
            support_radius,
        }
    }

    pub fn value(&self, node: usize) -> f64 {
        self.values[node]
    }

    pub fn map(&self, mesh: &Mesh, f: impl Fn(f64) -> f64) -> Self {
        Self::on(mesh, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn scaled(&self, mesh: &Mesh, s: f64) -> Self {
        self.map(mesh, |v| v * s)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_active(&self, mesh: &Mesh) -> f64 {
        mesh.active_nodes().map(|i| self.values[i]).fold(f64::INFINITY, f64::min)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_axes_and_bad_simpson() {
        assert!(GridSpec::new(vec![AxisSpec::bounded(0.0, 1.0, 7)], 10.0, QuadratureRule::Trapezoid).is_err());
        assert!(GridSpec::new(vec![AxisSpec::bounded(0.0, 1.0, 10)], 10.0, QuadratureRule::Simpson).is_err());
        assert!(GridSpec::new(vec![AxisSpec::bounded(0.0, 1.0, 11)], 10.0, QuadratureRule::Simpson).is_ok());
        assert!(GridSpec::new(vec![AxisSpec::bounded(0.0, 1.0, 11)], 0.0, QuadratureRule::Trapezoid).is_err());
    }

    #[test]
    fn truncation_cuts_plane_corners() {
        let m = ManifoldModel::plane(2).unwrap();
        let mesh = Mesh::for_model(m, 0.5, 5.0).unwrap();
        assert!(mesh.active_count() < mesh.len());
        assert!(mesh.active_nodes().all(|i| mesh.radius(i) <= 5.0 + 1e-9));
        let a = mesh.anchor();
        assert!(mesh.radius(a) < 1e-12);
    }

    #[test]
    fn pole_reflection_neighbors() {
        let m = ManifoldModel::sphere(2).unwrap();
        let mesh = Mesh::for_model(m, 0.3, 10.0).unwrap();
        let nphi = mesh.grid().axes[1].nodes;
        let node = mesh.node_at(&[0, 3]);
        let across = mesh.neighbor(node, 0, -1).unwrap();
        assert_eq!(mesh.multi_index(across), vec![0, 3 + nphi / 2]);
        // the reflected point is the geometric continuation
        let p = mesh.frame(node).position.clone();
        let q = mesh.frame(across).position.clone();
        assert!((p[0] - q[0]).abs() < 1e-14);
        let two = mesh.neighbor(node, 0, -2).unwrap();
        assert_eq!(mesh.multi_index(two), vec![1, 3 + nphi / 2]);
        assert!(mesh.active_nodes().all(|i| mesh.is_interior(i)));
    }

    #[test]
    fn periodic_axis_is_fastest() {
        let m = ManifoldModel::cylinder(1, 2).unwrap();
        let mesh = Mesh::for_model(m, 0.2, 6.0).unwrap();
        let a = mesh.node_at(&[1, 0]);
        assert_eq!(a, 1);
        assert_eq!(mesh.neighbor(0, 0, -1), Some(mesh.grid().axes[0].nodes - 1));
        assert_eq!(mesh.neighbor(0, 1, -1), None);
    }
}

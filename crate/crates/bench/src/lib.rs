//! Fixtures shared by the benchmarks.

use shrinklsi_core::measure::{bump, normalize, Weight};
use shrinklsi_core::{DiscreteField, ManifoldModel, Mesh};

pub fn line(spacing: f64) -> Mesh {
    Mesh::for_model(ManifoldModel::plane(1).unwrap(), spacing, 24.0).unwrap()
}

pub fn cylinder(spacing: f64) -> Mesh {
    Mesh::for_model(ManifoldModel::cylinder(1, 2).unwrap(), spacing, 8.0).unwrap()
}

pub fn round_sphere(spacing: f64) -> Mesh {
    Mesh::for_model(ManifoldModel::sphere(2).unwrap(), spacing, 3.0).unwrap()
}

/// Unit-mass bump of width 1.5 centred at the first ambient coordinate 0.5.
pub fn bump_density(mesh: &Mesh) -> DiscreteField {
    let mut center = vec![0.0; mesh.model().ambient_dim()];
    center[0] = 0.5;
    normalize(mesh, &bump(mesh, &center, 1.5), Weight::Volume).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use shrinklsi_core::measure::integrate;

    #[test]
    fn fixtures_are_normalized() {
        for mesh in [line(0.1), cylinder(0.2)] {
            assert!((integrate(&mesh, &bump_density(&mesh)).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}

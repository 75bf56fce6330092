//! Numerical toolkit for log-Sobolev deficits on self-shrinkers.

pub mod entropy;
pub mod error;
pub mod abp;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod lsi;
pub mod measure;
pub mod linalg;
pub mod stencil;
pub mod transport;

pub use error::{Error, Result};
pub use geometry::{frame_at, shrinker_residual, ChartKind, Factor, GeometryFrame, ManifoldModel, ParamAxis};
pub use grid::{AxisKind, AxisSpec, DiscreteField, GridSpec, Mesh, QuadratureRule};
pub use measure::{CanonicalDensity, GrowthCheck, Weight};
pub use stencil::{Gradient, StencilOrder};
pub use entropy::{EntropyReport, EntropyValue, TestFamily};

//! Gradient flow of the Webster-curvature energy on model pseudohermitian
//! 3-manifolds, and the CR inversion of the Heisenberg group.
//!
//! Modules:
//!
//! - [`manifold`]: model geometries, quadrature, initial data
//! - [`operators`]: sublaplacians, Webster curvature, CR Yamabe operator, CG
//! - [`flow`]: energy/volume/Bondi functionals and time stepping
//! - [`inversion`]: `I(t, z) = (-t/|w|², z/w)` and its identities
//! - [`cli`]: configuration, outputs and the invariant suite

pub mod cli;
pub mod error;
pub mod flow;
pub mod inversion;
pub mod manifold;
pub mod operators;

pub use error::{FlowError, Result};
pub use flow::{FlowState, Diagnostics, Outcome, RunParameters, Trajectory};
pub use manifold::{build_geometry, GeometryKind, GeometrySpec, InitialData, ModelGeometry, ScalarField};
pub use operators::ConventionLedger;

//! Photoacoustic forward model on a hemispherical transducer array.
//!
//! The pressure at a transducer is `p(r, t) = d/dt [c0 t (A p0)(r, c0 t)]`,
//! where `A` averages the initial pressure over a sphere. Spheres are sampled
//! with a Fibonacci direction set and trilinear interpolation, the time
//! derivative by finite differences; the adjoint is the exact transpose of
//! that chain.

mod geometry;
mod io;
mod noise;
mod operator;

pub(crate) use geometry::check_encloses;
pub use geometry::{build_geometry, Geometry, GeometrySpec};
pub use io::{load_measurements, save_measurements, MeasurementSidecar, Provenance};
pub use noise::add_noise;
pub use operator::{
    adjoint_apply, fibonacci_directions, forward_apply, materialize_dense, operator_norm_sq, spherical_mean,
    KirchhoffOperator, MeasurementSet, TimeConfig,
};

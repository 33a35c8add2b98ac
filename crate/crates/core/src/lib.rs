//! Gaussian detector-field engine on a 1+1 dimensional lattice box.
//!
//! A massless scalar field with Dirichlet walls is coupled to pointlike
//! harmonic-oscillator detectors. States are zero-mean Gaussian and carried as
//! covariance matrices; evolution is by symplectic propagators and measurement
//! is a projective Gaussian collapse on a time slice. The same experiment is
//! run in two slicings of Minkowski space (the inertial `t` frame and a
//! conformally related `eta` frame) and the results are compared on slices
//! both frames share.
//!
//! Everything numerical is generic over [`Real`] (`f32` or `f64`); the
//! aliases at the bottom of this file fix the scalar to `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod gaussian;
pub mod geometry;
pub mod lattice;
pub mod measurement;
pub mod scenarios;

mod error;
mod linalg;

pub use error::{Error, Result};

use nalgebra::RealField;
use num_traits::{FloatConst, FromPrimitive, ToPrimitive};

/// Scalar type the engine computes in.
pub trait Real: RealField + Copy + FloatConst + FromPrimitive + ToPrimitive + Send + Sync + 'static {
    /// Converts an `f64` literal or parameter.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }

    /// Tolerance floor for iterative solves: the requested tolerance, or a
    /// few ulps when the type cannot resolve it.
    fn solve_tol(requested: f64) -> Self {
        let floor = Self::default_epsilon() * Self::lit(16.0);
        let t = Self::lit(requested);
        if t > floor {
            t
        } else {
            floor
        }
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub use dynamics::{IntegratorOptions, Propagator, QuadraticHamiltonian, Scheme};
pub use gaussian::{CovarianceState, Detector, Observable, PhaseSpaceLayout};
pub use geometry::{Chart, Frame, WorldlineClock};
pub use lattice::{FieldGrid, FieldKernel, LatticeSpec, Window};
pub use measurement::{MeasurementSpec, MeterConvention};
pub use scenarios::{ConsistencyReport, ScenarioConfig};

pub type Chart64 = Chart<f64>;
pub type Clock64 = WorldlineClock<f64>;
pub type Lattice64 = LatticeSpec<f64>;
pub type Grid64 = FieldGrid<f64>;
pub type Kernel64 = FieldKernel<f64>;
pub type State64 = CovarianceState<f64>;
pub type Hamiltonian64 = QuadraticHamiltonian<f64>;
pub type Propagator64 = Propagator<f64>;

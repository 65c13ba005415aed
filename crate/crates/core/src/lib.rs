//! Simulation core for the stochastic transport equation driven by
//! Kraichnan noise on the periodic torus.
//!
//! Every numerical type is generic over the scalar [`Real`] (`f32` or
//! `f64`); the aliases at the bottom of this file fix `f64`, which is what
//! the command-line tool and the acceptance suite use.

pub mod error;
pub mod field;
pub mod grid;
pub mod interp;
pub mod noise;
pub mod scalar;
pub mod solver;
pub mod drift;
pub mod io;
pub mod reference;
pub mod diagnostics;
pub mod control;
pub mod experiments;

pub use error::{Error, Result};
pub use field::{ModeMap, ScalarField, VectorField};
pub use grid::{Domain, Grid};
pub use noise::{NoiseBasis, NoiseIncrement, NoisePath, NoiseSpec};
pub use scalar::Real;

pub type ScalarFieldF64 = ScalarField<f64>;
pub type VectorFieldF64 = VectorField<f64>;
pub type DomainF64 = Domain<f64>;
pub type NoiseBasisF64 = NoiseBasis<f64>;

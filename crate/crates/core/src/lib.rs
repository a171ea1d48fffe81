//! Polarization compensation toolkit.
//!
//! The crate is organised bottom-up:
//!
//! - [`stokes`]: Stokes vectors, Mueller matrices, optical-element matrices and fidelity.
//! - [`polarimetry`]: rotating quarter-waveplate tomography (scan simulation and
//!   Fourier-sum inversion to a normalized Stokes estimate).
//! - [`lcvr`]: liquid-crystal variable retarder characterization, arccos fold
//!   unwrapping and voltage/retardance lookup.
//! - [`compensation`]: the closed loop that infers the disturbed state, solves for
//!   three retardances, maps them to drive voltages and fine-tunes.
//! - [`bench`]: a virtual apparatus (random fiber rotations, detector noise, LCVR
//!   actuation errors) and a trial harness.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`). The aliases at the
//! crate root fix the scalar to `f64`, which is what the bench and CLI use.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bench;
pub mod compensation;
pub mod error;
pub mod lcvr;
mod linalg;
pub mod noise;
pub mod polarimetry;
pub mod scalar;
pub mod stokes;

pub use error::{Error, Result};
pub use noise::NoiseModel;
pub use scalar::Scalar;
pub use stokes::{CardinalState, MuellerMatrix, NormalizedStokes, StokesVector};

/// Stokes vector over `f64`.
pub type Stokes = StokesVector<f64>;
/// Normalized (Poincaré-sphere) Stokes vector over `f64`.
pub type Normalized = NormalizedStokes<f64>;
/// Mueller matrix over `f64`.
pub type Mueller = MuellerMatrix<f64>;
/// Polarimeter scan over `f64`.
pub type Scan = polarimetry::PolarimeterScan<f64>;
/// Retardance curve over `f64`.
pub type Curve = lcvr::RetardanceCurve<f64>;
/// Characterization sweep over `f64`.
pub type Sweep = lcvr::CharacterizationSweep<f64>;
/// Compensation loop configuration over `f64`.
pub type Config = compensation::LoopConfig<f64>;
/// Compensation run transcript over `f64`.
pub type Run = compensation::CompensationRun<f64>;
/// Noise model over `f64`.
pub type Noise = NoiseModel<f64>;

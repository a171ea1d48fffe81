//! Noise model of the simulated apparatus.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Disturbances injected by the virtual apparatus.
///
/// Detector quantities are in volts with a detector gain of 1 V per unit intensity,
/// so `pd_sigma` is also the noise relative to a unit-intensity full scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel<T> {
    /// Gaussian photodetector noise per tomography sample.
    pub pd_sigma: T,
    /// Constant detector background (dark) voltage.
    pub background_v: T,
    /// Gaussian jitter of each rotation-mount angle reading, radians.
    pub angle_jitter_sigma: T,
    /// LCVR drive-voltage granularity; zero disables quantization.
    pub voltage_quantum_v: T,
    /// Amplitude of a smooth systematic bias between a characterization curve and
    /// the retardance the device actually produces, radians.
    pub retardance_curve_error: T,
}

impl<T: Scalar> NoiseModel<T> {
    /// Everything off.
    pub fn none() -> Self {
        Self {
            pd_sigma: T::zero(),
            background_v: T::zero(),
            angle_jitter_sigma: T::zero(),
            voltage_quantum_v: T::zero(),
            retardance_curve_error: T::zero(),
        }
    }

    /// Preset calibrated so simulated rotating-QWP tomography of the cardinal states
    /// averages a fidelity of about 0.9965 with 310-sample scans.
    pub fn paper() -> Self {
        Self {
            pd_sigma: T::lit(PAPER_PD_SIGMA),
            background_v: T::lit(0.02),
            angle_jitter_sigma: T::lit(0.05f64.to_radians()),
            voltage_quantum_v: T::lit(0.01),
            retardance_curve_error: T::lit(0.01),
        }
    }

    /// Same model with a different detector noise level.
    pub fn with_pd_sigma(mut self, pd_sigma: T) -> Self {
        self.pd_sigma = pd_sigma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("pd_sigma", self.pd_sigma),
            ("background_v", self.background_v),
            ("angle_jitter_sigma", self.angle_jitter_sigma),
            ("voltage_quantum_v", self.voltage_quantum_v),
            ("retardance_curve_error", self.retardance_curve_error),
        ];
        for (name, v) in fields {
            if !(v >= T::zero()) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("noise field {name} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Per-sample detector noise of the `paper` preset, volts.
pub const PAPER_PD_SIGMA: f64 = 0.3;

impl<T: Scalar> Default for NoiseModel<T> {
    fn default() -> Self {
        Self::none()
    }
}

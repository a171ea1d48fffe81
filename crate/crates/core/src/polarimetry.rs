//! Rotating quarter-waveplate tomography.
//!
//! Light passes a QWP at angle `φ` and then a PBS; the detector sees
//! `I(φ) = ½(A + B sin 2φ + C cos 4φ + D sin 4φ)`. A scan over one or more full
//! revolutions is reduced to the four Fourier coefficients by discrete sums using
//! the measured mount angles, after subtracting the detector background and the
//! mount-to-fast-axis offset `α`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::noise::NoiseModel;
use crate::scalar::Scalar;
use crate::stokes::{MuellerMatrix, NormalizedStokes, StokesVector};

/// Fewest samples accepted in a scan (margin over the 4φ harmonic).
pub const MIN_SAMPLES: usize = 16;

/// Number of samples per revolution of the lab rotation mount.
pub const LAB_SAMPLES: usize = 310;

/// Degenerate-state threshold relative to `a0`.
const DEGENERATE_RATIO: f64 = 1e-12;

/// One detector reading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanSample<T> {
    /// Raw mount angle reading, radians.
    pub angle_measured: T,
    /// Raw photodetector voltage.
    pub detector_voltage: T,
}

/// A complete tomography record with its calibration constants.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarimeterScan<T> {
    samples: Vec<ScanSample<T>>,
    background_voltage: T,
    offset_alpha: T,
}

impl<T: Scalar> PolarimeterScan<T> {
    /// Validates sample count, ordering and angular coverage.
    ///
    /// Coverage is accepted when `span + 1.5·step ≥ 2π`, `step` being the mean
    /// angular step; a uniform grid of `N` points at `step` qualifies once
    /// `(N + ½)·step ≥ 2π`, which tolerates rounding of a nominal step size.
    pub fn new(samples: Vec<ScanSample<T>>, background_voltage: T, offset_alpha: T) -> Result<Self> {
        if samples.len() < MIN_SAMPLES {
            return Err(Error::InvalidScan(format!(
                "{} samples, need at least {MIN_SAMPLES}",
                samples.len()
            )));
        }
        if !background_voltage.is_finite() || !offset_alpha.is_finite() {
            return Err(Error::InvalidScan("non-finite calibration constant".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if !s.angle_measured.is_finite() || !s.detector_voltage.is_finite() {
                return Err(Error::InvalidScan(format!("non-finite sample at index {i}")));
            }
        }
        if let Some(i) = samples
            .windows(2)
            .position(|w| !(w[1].angle_measured > w[0].angle_measured))
        {
            return Err(Error::InvalidScan(format!(
                "angles not strictly increasing at index {}",
                i + 1
            )));
        }
        let span = samples[samples.len() - 1].angle_measured - samples[0].angle_measured;
        let step = span / T::from_usize(samples.len() - 1).unwrap();
        if span + T::lit(1.5) * step < T::TAU() {
            return Err(Error::InsufficientSpan { span: span.as_f64() });
        }
        Ok(Self {
            samples,
            background_voltage,
            offset_alpha,
        })
    }

    pub fn samples(&self) -> &[ScanSample<T>] {
        &self.samples
    }

    pub fn background_voltage(&self) -> T {
        self.background_voltage
    }

    pub fn offset_alpha(&self) -> T {
        self.offset_alpha
    }
}

/// Fourier coefficients of the detector signal, in detector units.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FourierCoefficients<T> {
    pub a0: T,
    pub b0: T,
    pub c0: T,
    pub d0: T,
}

/// Sampling geometry and detector gain for a simulated scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanConfig<T> {
    pub n_samples: usize,
    /// Angular step between samples, radians.
    pub step: T,
    /// Offset between the QWP fast axis and the mount zero, radians.
    pub alpha: T,
    /// Detector volts per unit intensity.
    pub gain: T,
}

impl<T: Scalar> ScanConfig<T> {
    /// `n` uniformly spaced samples over exactly one revolution.
    pub fn full_turn(n: usize) -> Self {
        Self {
            n_samples: n,
            step: T::TAU() / T::from_usize(n).unwrap(),
            alpha: T::zero(),
            gain: T::one(),
        }
    }

    /// One revolution sampled like the lab mount (310 points, ≈1.16°).
    pub fn lab() -> Self {
        Self::full_turn(LAB_SAMPLES)
    }

    pub fn with_alpha(mut self, alpha: T) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_gain(mut self, gain: T) -> Self {
        self.gain = gain;
        self
    }
}

/// Intensity transmitted by the QWP + PBS analyzer at fast-axis angle `phi`.
pub fn ideal_intensity<T: Scalar>(s: &StokesVector<T>, phi: T) -> T {
    let (s2p, c2p) = (phi + phi).sin_cos();
    T::lit(0.5) * (s.s0 + s.s1 * c2p * c2p + s.s2 * s2p * c2p - s.s3 * s2p)
}

/// Analyzer matrix `M_PBS · M_QWP(phi)`.
pub fn analyzer<T: Scalar>(phi: T) -> MuellerMatrix<T> {
    MuellerMatrix::pbs() * MuellerMatrix::qwp(phi)
}

/// Simulates a scan of `s_in`: `V = gain·I(φ) + background + N(0, pd_sigma)` at the
/// true angles `φ_n = n·step`, reported as `φ_n + α + N(0, angle_jitter)`.
pub fn simulate_scan<T: Scalar>(
    s_in: &StokesVector<T>,
    config: &ScanConfig<T>,
    noise: &NoiseModel<T>,
    seed: u64,
) -> Result<PolarimeterScan<T>> {
    noise.validate()?;
    let n = T::from_usize(config.n_samples).unwrap();
    if !(config.step > T::zero()) || (n + T::lit(0.5)) * config.step < T::TAU() {
        return Err(Error::InsufficientSpan {
            span: (n * config.step).as_f64(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..config.n_samples)
        .map(|i| {
            // Both draws always happen so the stream is independent of the sigmas.
            let jitter: f64 = StandardNormal.sample(&mut rng);
            let pd: f64 = StandardNormal.sample(&mut rng);
            let phi = T::from_usize(i).unwrap() * config.step;
            ScanSample {
                angle_measured: phi + config.alpha + noise.angle_jitter_sigma * T::lit(jitter),
                detector_voltage: config.gain * ideal_intensity(s_in, phi)
                    + noise.background_v
                    + noise.pd_sigma * T::lit(pd),
            }
        })
        .collect();
    PolarimeterScan::new(samples, noise.background_v, config.alpha)
}

/// Background-subtracted, offset-corrected discrete Fourier sums.
pub fn extract_coefficients<T: Scalar>(scan: &PolarimeterScan<T>) -> FourierCoefficients<T> {
    let n = T::from_usize(scan.samples.len()).unwrap();
    let mut acc = FourierCoefficients::<T>::default();
    for s in &scan.samples {
        let v = s.detector_voltage - scan.background_voltage;
        let x = s.angle_measured - scan.offset_alpha;
        let (s2, _) = (x + x).sin_cos();
        let (s4, c4) = (T::lit(4.0) * x).sin_cos();
        acc.a0 = acc.a0 + v;
        acc.b0 = acc.b0 + v * s2;
        acc.c0 = acc.c0 + v * c4;
        acc.d0 = acc.d0 + v * s4;
    }
    let two = T::lit(2.0) / n;
    let four = T::lit(4.0) / n;
    FourierCoefficients {
        a0: acc.a0 * two,
        b0: acc.b0 * four,
        c0: acc.c0 * four,
        d0: acc.d0 * four,
    }
}

/// Inverts `A = S0 + S1/2, B = −S3, C = S1/2, D = S2/2`.
pub fn stokes_from_coefficients<T: Scalar>(c: &FourierCoefficients<T>) -> StokesVector<T> {
    let two = T::lit(2.0);
    StokesVector::new(c.a0 - c.c0, two * c.c0, two * c.d0, -c.b0)
}

/// Everything a tomography run produces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tomography<T> {
    pub fourier: FourierCoefficients<T>,
    /// Stokes vector in detector units (scaled by the unknown gain).
    pub stokes: StokesVector<T>,
    pub normalized: NormalizedStokes<T>,
    /// `None` when the estimated `S0` is not positive.
    pub dop: Option<T>,
}

/// Full tomography of a scan.
pub fn tomography<T: Scalar>(scan: &PolarimeterScan<T>) -> Result<Tomography<T>> {
    let fourier = extract_coefficients(scan);
    let stokes = stokes_from_coefficients(&fourier);
    let norm = stokes.polarized_norm();
    if !(norm > T::lit(DEGENERATE_RATIO) * fourier.a0.abs()) {
        return Err(Error::Degenerate);
    }
    let normalized = stokes.normalize()?;
    let dop = stokes.degree_of_polarization().ok();
    if let Some(d) = dop {
        log::debug!("tomography degree of polarization {d:.6}");
    }
    Ok(Tomography {
        fourier,
        stokes,
        normalized,
        dop,
    })
}

/// Normalized state estimate from a scan; independent of detector gain.
pub fn measure_stokes<T: Scalar>(scan: &PolarimeterScan<T>) -> Result<NormalizedStokes<T>> {
    tomography(scan).map(|t| t.normalized)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stokes::{fidelity, CardinalState};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_4, PI};

    type S = StokesVector<f64>;

    fn noiseless(s: &S, cfg: &ScanConfig<f64>) -> PolarimeterScan<f64> {
        simulate_scan(s, cfg, &NoiseModel::none(), 1).unwrap()
    }

    #[test]
    fn intensity_examples() {
        assert_abs_diff_eq!(ideal_intensity(&S::new(1.0, 1.0, 0.0, 0.0), 0.0), 1.0);
        assert_abs_diff_eq!(
            ideal_intensity(&S::new(1.0, 1.0, 0.0, 0.0), FRAC_PI_4),
            0.5,
            epsilon = 1e-15
        );
        let r = S::new(1.0, 0.0, 0.0, 1.0);
        let via_matrix = analyzer(FRAC_PI_4).apply(&r).s0;
        assert_abs_diff_eq!(via_matrix, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ideal_intensity(&r, FRAC_PI_4), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn lab_step_is_accepted() {
        let cfg = ScanConfig {
            n_samples: 310,
            step: 1.16f64.to_radians(),
            alpha: 0.0,
            gain: 1.0,
        };
        let scan = noiseless(&S::new(1.0, 1.0, 0.0, 0.0), &cfg);
        assert_eq!(scan.samples()[0].detector_voltage, 1.0);
        assert_eq!(scan.samples().len(), 310);
    }

    #[test]
    fn insufficient_span_rejected() {
        let cfg = ScanConfig {
            n_samples: 100,
            step: 0.05,
            alpha: 0.0,
            gain: 1.0,
        };
        assert!(matches!(
            simulate_scan(&S::new(1.0, 1.0, 0.0, 0.0), &cfg, &NoiseModel::none(), 0),
            Err(Error::InsufficientSpan { .. })
        ));
    }

    #[test]
    fn scan_validation() {
        let sample = |a: f64| ScanSample {
            angle_measured: a,
            detector_voltage: 1.0,
        };
        let few: Vec<_> = (0..8).map(|i| sample(i as f64)).collect();
        assert!(matches!(
            PolarimeterScan::new(few, 0.0, 0.0),
            Err(Error::InvalidScan(_))
        ));
        let mut unordered: Vec<_> = (0..32).map(|i| sample(i as f64 * 0.2)).collect();
        unordered.swap(3, 4);
        assert!(matches!(
            PolarimeterScan::new(unordered, 0.0, 0.0),
            Err(Error::InvalidScan(_))
        ));
    }

    #[test]
    fn simulation_is_deterministic() {
        let cfg = ScanConfig::lab();
        let noise = NoiseModel::paper();
        let s = S::new(1.0, 0.2, -0.5, 0.3);
        assert_eq!(
            simulate_scan(&s, &cfg, &noise, 42).unwrap(),
            simulate_scan(&s, &cfg, &noise, 42).unwrap()
        );
        assert_ne!(
            simulate_scan(&s, &cfg, &noise, 42).unwrap(),
            simulate_scan(&s, &cfg, &noise, 43).unwrap()
        );
    }

    #[test]
    fn detector_noise_statistics() {
        let sigma = 0.01;
        let noise = NoiseModel::none().with_pd_sigma(sigma);
        let cfg = ScanConfig::full_turn(1000);
        let s = S::new(1.0, 0.0, 1.0, 0.0);
        let mut sum2 = 0.0;
        let mut count = 0usize;
        for seed in 0..100 {
            let scan = simulate_scan(&s, &cfg, &noise, seed).unwrap();
            for (i, smp) in scan.samples().iter().enumerate() {
                let ideal = ideal_intensity(&s, i as f64 * cfg.step);
                sum2 += (smp.detector_voltage - ideal).powi(2);
                count += 1;
            }
        }
        let empirical = (sum2 / count as f64).sqrt();
        assert_eq!(count, 100_000);
        assert!((empirical / sigma - 1.0).abs() < 0.2, "sigma {empirical}");
    }

    #[test]
    fn coefficient_examples() {
        let cfg = ScanConfig::lab();
        let c = extract_coefficients(&noiseless(&S::new(1.0, 0.0, 0.0, -1.0), &cfg));
        assert_abs_diff_eq!(c.b0, 1.0, epsilon = 1e-9);

        let c = extract_coefficients(&noiseless(&S::new(1.0, 1.0, 0.0, 0.0), &cfg));
        for (got, want) in [(c.a0, 1.5), (c.b0, 0.0), (c.c0, 0.5), (c.d0, 0.0)] {
            assert_abs_diff_eq!(got, want, epsilon = 1e-9);
        }

        let c = extract_coefficients(&noiseless(&S::new(1.0, 0.0, 1.0, 0.0), &cfg));
        assert_abs_diff_eq!(c.d0, 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(c.b0, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(c.c0, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn coefficients_match_direct_summation() {
        // Oracle: sample the analyzer matrix product directly and sum.
        let s = S::new(1.0, 0.3, -0.4, 0.5);
        let n = 64;
        let step = 2.0 * PI / n as f64;
        let (mut a, mut b, mut c, mut d) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            let phi = i as f64 * step;
            let v = analyzer(phi).apply(&s).s0;
            a += v;
            b += v * (2.0 * phi).sin();
            c += v * (4.0 * phi).cos();
            d += v * (4.0 * phi).sin();
        }
        let got = extract_coefficients(&noiseless(&s, &ScanConfig::full_turn(n)));
        assert_abs_diff_eq!(got.a0, 2.0 * a / n as f64, epsilon = 1e-12);
        assert_abs_diff_eq!(got.b0, 4.0 * b / n as f64, epsilon = 1e-12);
        assert_abs_diff_eq!(got.c0, 4.0 * c / n as f64, epsilon = 1e-12);
        assert_abs_diff_eq!(got.d0, 4.0 * d / n as f64, epsilon = 1e-12);
    }

    #[test]
    fn inversion_examples() {
        let s = stokes_from_coefficients(&FourierCoefficients {
            a0: 1.5,
            b0: 0.0,
            c0: 0.5,
            d0: 0.0,
        });
        assert_eq!(s.as_array(), [1.0, 1.0, 0.0, 0.0]);
        let s = stokes_from_coefficients(&FourierCoefficients {
            a0: 1.0,
            b0: 0.0,
            c0: 0.0,
            d0: 0.0,
        });
        assert_eq!(s.as_array(), [1.0, 0.0, 0.0, 0.0]);
        let s = stokes_from_coefficients(&FourierCoefficients {
            a0: 1.0,
            b0: -1.0,
            c0: 0.0,
            d0: 0.0,
        });
        assert_eq!(s.as_array(), [1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn cardinal_round_trip() {
        for state in CardinalState::ALL {
            let scan = noiseless(&state.stokes(), &ScanConfig::lab());
            let f = fidelity(&measure_stokes(&scan).unwrap(), &state.normalized());
            assert!(f >= 1.0 - 1e-10, "{state}: {f}");
        }
    }

    #[test]
    fn gain_cancels() {
        let s = S::new(1.0, 0.1, 0.7, -0.2).normalize().unwrap().to_stokes();
        let a = measure_stokes(&noiseless(&s, &ScanConfig::lab().with_gain(0.37))).unwrap();
        let b = measure_stokes(&noiseless(&s, &ScanConfig::lab())).unwrap();
        assert!(a.distance(&b) < 1e-12);
    }

    #[test]
    fn unpolarized_is_degenerate() {
        let scan = noiseless(&S::new(1.0, 0.0, 0.0, 0.0), &ScanConfig::lab());
        assert_eq!(measure_stokes(&scan), Err(Error::Degenerate));
    }

    #[test]
    fn noisy_scans_stay_accurate() {
        let noise = NoiseModel::<f64>::paper();
        for state in CardinalState::ALL {
            let mean: f64 = (0..50)
                .map(|seed| {
                    let scan = simulate_scan(&state.stokes(), &ScanConfig::lab(), &noise, seed).unwrap();
                    fidelity(&measure_stokes(&scan).unwrap(), &state.normalized())
                })
                .sum::<f64>()
                / 50.0;
            assert!(mean >= 0.99, "{state}: {mean}");
        }
    }

    fn pure_state() -> impl Strategy<Value = S> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("non-zero", |(x, y, z)| x * x + y * y + z * z > 1e-2)
            .prop_map(|(x, y, z)| NormalizedStokes::from_components(x, y, z).unwrap().to_stokes())
    }

    proptest! {
        #[test]
        fn round_trip_any_pure_state(s in pure_state(), n in 32usize..400) {
            let scan = noiseless(&s, &ScanConfig::full_turn(n));
            let f = fidelity(&measure_stokes(&scan).unwrap(), &s.normalize().unwrap());
            prop_assert!(f >= 1.0 - 1e-10);
        }

        #[test]
        fn gain_and_background_invariance(s in pure_state(), k in 0.05..20.0f64, bg in 0.0..1.0f64) {
            let reference = measure_stokes(&noiseless(&s, &ScanConfig::lab())).unwrap();
            let noise = NoiseModel { background_v: bg, ..NoiseModel::none() };
            let scan = simulate_scan(&s, &ScanConfig::lab().with_gain(k), &noise, 3).unwrap();
            prop_assert!(measure_stokes(&scan).unwrap().distance(&reference) < 1e-9);
        }

        #[test]
        fn offset_is_corrected(s in pure_state(), alpha in -1.0..1.0f64) {
            let reference = measure_stokes(&noiseless(&s, &ScanConfig::lab())).unwrap();
            let shifted = measure_stokes(&noiseless(&s, &ScanConfig::lab().with_alpha(alpha))).unwrap();
            prop_assert!(shifted.distance(&reference) < 1e-9);
        }

        #[test]
        fn intensity_bounded(s in pure_state(), phi in -7.0..7.0f64) {
            let i = ideal_intensity(&s, phi);
            prop_assert!(i >= -1e-15 && i <= s.s0 + 1e-15);
        }

        #[test]
        fn constant_scan_has_no_harmonics(v in -5.0..5.0f64, n in 16usize..500) {
            let step = 2.0 * PI / n as f64;
            let samples = (0..n)
                .map(|i| ScanSample { angle_measured: i as f64 * step, detector_voltage: v })
                .collect();
            let c = extract_coefficients(&PolarimeterScan::new(samples, 0.0, 0.0).unwrap());
            let tol = 1e-9 * n as f64;
            prop_assert!(c.b0.abs() <= tol && c.c0.abs() <= tol && c.d0.abs() <= tol);
        }
    }
}

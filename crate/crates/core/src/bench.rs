//! Virtual apparatus and trial harness.
//!
//! The simulated bench chains a source, a static random fiber rotation, the four
//! compensator LCVRs (0°, 45°, 0°, 45°) and a rotating-QWP polarimeter. LCVR
//! actuation quantizes drive voltages and adds a smooth per-cell bias between the
//! characterization curve and the retardance actually produced.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compensation::{
    run_compensation, Apparatus, LoopConfig, Phase, TerminationReason, LCVR_ANGLES_DEG,
};
use crate::error::{Error, Result};
use crate::lcvr::{CharacterizationSweep, RetardanceCurve, SweepPoint, LAB_VOLTAGE_STEP};
use crate::noise::NoiseModel;
use crate::polarimetry::{measure_stokes, simulate_scan, PolarimeterScan, ScanConfig};
use crate::stokes::{compose, fidelity, CardinalState, MuellerMatrix, NormalizedStokes, StokesVector};

/// Drive-voltage window of the bench LCVR curves, volts.
pub const BENCH_V_START: f64 = 0.1;
pub const BENCH_V_END: f64 = 16.0;

/// Period of the systematic curve bias in drive voltage, volts.
const BIAS_PERIOD_V: f64 = 5.0;

/// Modelled duration of one tomography scan (a full waveplate turn at 25°/s plus
/// occasional re-homing of the mount), seconds.
pub const SCAN_TIME_S: f64 = 30.0;
/// Modelled retarder settling time after new drive voltages, seconds.
pub const LCVR_SETTLE_S: f64 = 0.15;

const DISTURBANCE_STREAM: u64 = 1;
const APPARATUS_STREAM: u64 = 2;

/// Smooth LCVR response `δ(V) = δ_lo + (δ_hi − δ_lo) / (1 + (V/V½)^p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LcvrModel {
    pub delta_high: f64,
    pub delta_low: f64,
    pub v_half: f64,
    pub exponent: f64,
}

impl LcvrModel {
    /// About 2.35π at low drive falling to 0.1π, most of the swing below 5 V.
    pub fn paper_like() -> Self {
        Self {
            delta_high: 2.35 * std::f64::consts::PI,
            delta_low: 0.1 * std::f64::consts::PI,
            v_half: 2.0,
            exponent: 2.5,
        }
    }

    pub fn with_v_half(mut self, v_half: f64) -> Self {
        self.v_half = v_half;
        self
    }

    /// Same shape with `V½` moved so that `δ(v) = delta` exactly.
    pub fn with_retardance_at(mut self, v: f64, delta: f64) -> Result<Self> {
        if !(delta > self.delta_low && delta < self.delta_high) || !(v > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "retardance {delta} at {v} V is outside the model span"
            )));
        }
        let ratio = (self.delta_high - self.delta_low) / (delta - self.delta_low) - 1.0;
        self.v_half = v / ratio.powf(1.0 / self.exponent);
        Ok(self)
    }

    pub fn retardance(&self, v: f64) -> f64 {
        self.delta_low + (self.delta_high - self.delta_low) / (1.0 + (v / self.v_half).powf(self.exponent))
    }

    /// Samples the model on `[v_start, v_end]` at `step`.
    pub fn curve(&self, v_start: f64, v_end: f64, step: f64) -> Result<RetardanceCurve<f64>> {
        RetardanceCurve::from_fn(v_start, v_end, step, |v| self.retardance(v))
    }
}

/// The four bench cells: the same shape with slightly different `V½`.
pub fn bench_models() -> [LcvrModel; 4] {
    [1.8, 1.95, 2.1, 2.2].map(|v| LcvrModel::paper_like().with_v_half(v))
}

/// Curves of [`bench_models`] on the bench voltage window at the lab granularity.
pub fn bench_curves() -> Vec<RetardanceCurve<f64>> {
    bench_models()
        .iter()
        .map(|m| {
            m.curve(BENCH_V_START, BENCH_V_END, LAB_VOLTAGE_STEP)
                .expect("bench model curves are valid")
        })
        .collect()
}

/// Detector settings for a synthetic characterization sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepSynth {
    /// Reading at δ = π, volts.
    pub full_scale_v: f64,
    pub background_v: f64,
    /// Gaussian noise of a single detector sample, volts.
    pub sample_sigma: f64,
    /// Samples averaged per drive voltage.
    pub samples_per_point: usize,
    /// Samples averaged for the background.
    pub background_samples: usize,
}

impl SweepSynth {
    pub fn noiseless() -> Self {
        Self {
            full_scale_v: 1.0,
            background_v: 0.0,
            sample_sigma: 0.0,
            samples_per_point: 1,
            background_samples: 1,
        }
    }
}

/// Detector readings `V_b + (V_full − V_b)(1 − cos δ)/2` of a sweep through `delta`,
/// averaged as configured. SEMs are `σ/√k`.
pub fn synthetic_sweep(
    delta: impl Fn(f64) -> f64,
    voltages: &[f64],
    synth: &SweepSynth,
    seed: u64,
) -> Result<CharacterizationSweep<f64>> {
    if synth.samples_per_point == 0 || synth.background_samples == 0 || !(synth.sample_sigma >= 0.0) {
        return Err(Error::InvalidConfig("invalid sweep synthesis settings".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean_of = |truth: f64, k: usize, rng: &mut ChaCha8Rng| {
        let sum: f64 = (0..k)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                truth + synth.sample_sigma * z
            })
            .sum();
        sum / k as f64
    };
    let background = mean_of(synth.background_v, synth.background_samples, &mut rng);
    let swing = synth.full_scale_v - synth.background_v;
    let points = voltages
        .iter()
        .map(|&v| {
            let truth = synth.background_v + swing * (1.0 - delta(v).cos()) / 2.0;
            SweepPoint {
                drive_voltage_rms: v,
                mean_pd_voltage: mean_of(truth, synth.samples_per_point, &mut rng),
                pd_voltage_sem: synth.sample_sigma / (synth.samples_per_point as f64).sqrt(),
            }
        })
        .collect();
    let bg_sem = synth.sample_sigma / (synth.background_samples as f64).sqrt();
    CharacterizationSweep::new(points, background, bg_sem)
}

/// Static fiber rotation of one trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiberDisturbance {
    pub rotation: MuellerMatrix<f64>,
    pub seed: u64,
}

impl FiberDisturbance {
    pub fn identity() -> Self {
        Self {
            rotation: MuellerMatrix::identity(),
            seed: 0,
        }
    }
}

/// Rotation from a unit quaternion `(w, x, y, z)`.
fn quaternion_rotation(q: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Uniformly distributed sphere rotation (normalized Gaussian quaternion).
pub fn random_disturbance(seed: u64) -> FiberDisturbance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DISTURBANCE_STREAM);
    let q = loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            break q.map(|x| x / n);
        }
    };
    FiberDisturbance {
        rotation: MuellerMatrix::from_rotation(quaternion_rotation(q)),
        seed,
    }
}

/// Retardance a cell really produces when driven at `v`: the voltage is quantized
/// and clamped to the curve, and a bias `ε·sin(2πV/5 + 1.3·cell)` is added.
pub fn actuated_retardance(
    curve: &RetardanceCurve<f64>,
    cell: usize,
    v: f64,
    noise: &NoiseModel<f64>,
) -> Result<f64> {
    let q = noise.voltage_quantum_v;
    let v = if q > 0.0 { (v / q).round() * q } else { v };
    let v = curve.clamp_voltage(v);
    let bias =
        noise.retardance_curve_error * (std::f64::consts::TAU * v / BIAS_PERIOD_V + 1.3 * cell as f64).sin();
    Ok(curve.retardance_for_voltage(v)? + bias)
}

/// Noise-free state behind the compensator.
pub fn chain_state(
    disturbance: &FiberDisturbance,
    voltages: &[f64],
    curves: &[RetardanceCurve<f64>],
    source: &StokesVector<f64>,
    noise: &NoiseModel<f64>,
) -> Result<StokesVector<f64>> {
    if voltages.len() != curves.len() || !(3..=4).contains(&curves.len()) {
        return Err(Error::InvalidConfig(format!(
            "{} voltages for {} curves; need 3 or 4 of each",
            voltages.len(),
            curves.len()
        )));
    }
    let mut elements = vec![disturbance.rotation];
    for (i, (curve, &v)) in curves.iter().zip(voltages).enumerate() {
        let (lo, hi) = curve.voltage_range();
        if !(v >= lo - 1e-9 && v <= hi + 1e-9) {
            return Err(Error::OutOfRange {
                voltage: v,
                min: lo,
                max: hi,
            });
        }
        let d = actuated_retardance(curve, i, v, noise)?;
        elements.push(MuellerMatrix::lcvr(LCVR_ANGLES_DEG[i].to_radians(), d));
    }
    Ok(compose(&elements)?.apply(source))
}

/// One simulated tomography scan of the light behind the compensator.
pub fn virtual_measure(
    disturbance: &FiberDisturbance,
    voltages: &[f64],
    curves: &[RetardanceCurve<f64>],
    source: &StokesVector<f64>,
    noise: &NoiseModel<f64>,
    scan: &ScanConfig<f64>,
    seed: u64,
) -> Result<PolarimeterScan<f64>> {
    let s_out = chain_state(disturbance, voltages, curves, source, noise)?;
    simulate_scan(&s_out, scan, noise, seed)
}

/// Simulated bench behind the [`Apparatus`] interface.
#[derive(Debug, Clone)]
pub struct VirtualApparatus<'a> {
    pub disturbance: FiberDisturbance,
    pub curves: &'a [RetardanceCurve<f64>],
    pub source: StokesVector<f64>,
    pub noise: NoiseModel<f64>,
    pub scan: ScanConfig<f64>,
    rng: ChaCha8Rng,
    measurements: usize,
    modeled_s: f64,
}

impl<'a> VirtualApparatus<'a> {
    /// Horizontal source, lab scan geometry; scan noise seeded from `seed`.
    pub fn new(
        disturbance: FiberDisturbance,
        curves: &'a [RetardanceCurve<f64>],
        noise: NoiseModel<f64>,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(APPARATUS_STREAM);
        Self {
            disturbance,
            curves,
            source: CardinalState::H.stokes(),
            noise,
            scan: ScanConfig::lab(),
            rng,
            measurements: 0,
            modeled_s: 0.0,
        }
    }

    pub fn with_source(mut self, source: StokesVector<f64>) -> Self {
        self.source = source;
        self
    }

    pub fn with_scan(mut self, scan: ScanConfig<f64>) -> Self {
        self.scan = scan;
        self
    }

    /// Scans performed so far.
    pub fn measurements(&self) -> usize {
        self.measurements
    }

    /// Bench time the measurements so far would have taken. Nothing waits for it.
    pub fn modeled_seconds(&self) -> f64 {
        self.modeled_s
    }
}

impl Apparatus<f64> for VirtualApparatus<'_> {
    fn measure(&mut self, voltages: &[f64]) -> Result<NormalizedStokes<f64>> {
        let seed = self.rng.next_u64();
        self.measurements += 1;
        self.modeled_s += LCVR_SETTLE_S + SCAN_TIME_S;
        let scan = virtual_measure(
            &self.disturbance,
            voltages,
            self.curves,
            &self.source,
            &self.noise,
            &self.scan,
            seed,
        )?;
        measure_stokes(&scan)
    }

    fn true_state(&self, voltages: &[f64]) -> Option<NormalizedStokes<f64>> {
        chain_state(
            &self.disturbance,
            voltages,
            self.curves,
            &self.source,
            &self.noise,
        )
        .ok()?
        .normalize()
        .ok()
    }
}

/// Per-step fidelity of a trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub phase: Phase,
    pub fidelity: f64,
    pub best_fidelity: f64,
    pub true_fidelity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub seed: u64,
    pub steps_to_97: Option<usize>,
    pub steps_to_99: Option<usize>,
    pub steps_to_995: Option<usize>,
    pub reason: TerminationReason,
    /// Measurements after the initial one.
    pub total_steps: usize,
    /// Modelled bench time of all measurements, seconds.
    pub modeled_seconds: f64,
    #[serde(skip)]
    pub trace: Vec<TracePoint>,
}

/// Seeds of trials that never reached each threshold.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Unreached {
    pub steps_to_97: Vec<u64>,
    pub steps_to_99: Vec<u64>,
    pub steps_to_995: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialStats {
    pub trials: Vec<TrialOutcome>,
    pub mean_steps_to_97: Option<f64>,
    pub mean_steps_to_99: Option<f64>,
    pub mean_steps_to_995: Option<f64>,
    pub unreached: Unreached,
}

fn mean_reached(steps: impl Iterator<Item = Option<usize>>) -> Option<f64> {
    let reached: Vec<usize> = steps.flatten().collect();
    if reached.is_empty() {
        None
    } else {
        Some(reached.iter().sum::<usize>() as f64 / reached.len() as f64)
    }
}

impl TrialStats {
    /// Aggregates outcomes; means cover only the trials that reached a threshold.
    pub fn from_outcomes(trials: Vec<TrialOutcome>) -> Self {
        let unreached_of = |f: fn(&TrialOutcome) -> Option<usize>| {
            trials.iter().filter(|t| f(t).is_none()).map(|t| t.seed).collect()
        };
        let unreached = Unreached {
            steps_to_97: unreached_of(|t| t.steps_to_97),
            steps_to_99: unreached_of(|t| t.steps_to_99),
            steps_to_995: unreached_of(|t| t.steps_to_995),
        };
        Self {
            mean_steps_to_97: mean_reached(trials.iter().map(|t| t.steps_to_97)),
            mean_steps_to_99: mean_reached(trials.iter().map(|t| t.steps_to_99)),
            mean_steps_to_995: mean_reached(trials.iter().map(|t| t.steps_to_995)),
            unreached,
            trials,
        }
    }
}

/// Everything a trial shares with its siblings.
#[derive(Debug, Clone)]
pub struct TrialSetup {
    pub curves: Vec<RetardanceCurve<f64>>,
    pub target: NormalizedStokes<f64>,
    pub source: StokesVector<f64>,
    pub scan: ScanConfig<f64>,
}

impl Default for TrialSetup {
    /// Bench curves, H source, target R, lab scans.
    fn default() -> Self {
        Self {
            curves: bench_curves(),
            target: CardinalState::R.normalized(),
            source: CardinalState::H.stokes(),
            scan: ScanConfig::lab(),
        }
    }
}

/// One compensation against a fresh random disturbance derived from `seed`.
pub fn run_trial(
    setup: &TrialSetup,
    config: &LoopConfig<f64>,
    noise: &NoiseModel<f64>,
    seed: u64,
) -> Result<TrialOutcome> {
    let mut apparatus = VirtualApparatus::new(random_disturbance(seed), &setup.curves, *noise, seed)
        .with_source(setup.source)
        .with_scan(setup.scan);
    let run = run_compensation(&mut apparatus, &setup.curves, setup.target, config, seed)?;
    let term = run.termination().expect("finished runs carry a termination");
    let trace = run
        .records()
        .iter()
        .map(|r| TracePoint {
            step: r.step,
            phase: r.phase,
            fidelity: r.fidelity,
            best_fidelity: r.best_fidelity,
            true_fidelity: r.true_fidelity,
        })
        .collect();
    Ok(TrialOutcome {
        seed,
        steps_to_97: term.steps_to_97,
        steps_to_99: term.steps_to_99,
        steps_to_995: term.steps_to_995,
        reason: term.reason,
        total_steps: run.records().len() - 1,
        modeled_seconds: apparatus.modeled_seconds(),
        trace,
    })
}

/// `n` trials with seeds `base_seed, base_seed + 1, …`, run in parallel; outcomes
/// keep seed order.
pub fn run_trials_with(
    setup: &TrialSetup,
    n: usize,
    config: &LoopConfig<f64>,
    noise: &NoiseModel<f64>,
    base_seed: u64,
) -> Result<TrialStats> {
    if n == 0 {
        return Err(Error::InvalidConfig("need at least one trial".into()));
    }
    config.validate()?;
    noise.validate()?;
    let outcomes = (0..n as u64)
        .into_par_iter()
        .map(|i| run_trial(setup, config, noise, base_seed.wrapping_add(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrialStats::from_outcomes(outcomes))
}

/// [`run_trials_with`] on the default setup.
pub fn run_trials(
    n: usize,
    config: &LoopConfig<f64>,
    noise: &NoiseModel<f64>,
    base_seed: u64,
) -> Result<TrialStats> {
    run_trials_with(&TrialSetup::default(), n, config, noise, base_seed)
}

/// Fraction of `n` random disturbances for which the image of `u` lands in each
/// octant, indexed by the sign bits of `(u1, u2, u3)`.
pub fn octant_histogram(n: usize, base_seed: u64, u: &NormalizedStokes<f64>) -> [f64; 8] {
    let mut counts = [0usize; 8];
    for i in 0..n as u64 {
        let img = random_disturbance(base_seed.wrapping_add(i)).rotation.rotate(u);
        let a = img.as_array();
        let idx = (a[0] < 0.0) as usize | ((a[1] < 0.0) as usize) << 1 | ((a[2] < 0.0) as usize) << 2;
        counts[idx] += 1;
    }
    counts.map(|c| c as f64 / n as f64)
}

/// Uniform random point on the sphere.
pub fn random_state<R: Rng + ?Sized>(rng: &mut R) -> NormalizedStokes<f64> {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
        if let Ok(u) = NormalizedStokes::from_components(v[0], v[1], v[2]) {
            return u;
        }
    }
}

/// Fidelity of the noise-free chain output with `target`.
pub fn chain_fidelity(
    disturbance: &FiberDisturbance,
    voltages: &[f64],
    curves: &[RetardanceCurve<f64>],
    source: &StokesVector<f64>,
    target: &NormalizedStokes<f64>,
) -> Result<f64> {
    let s = chain_state(disturbance, voltages, curves, source, &NoiseModel::none())?;
    Ok(fidelity(&s.normalize()?, target))
}

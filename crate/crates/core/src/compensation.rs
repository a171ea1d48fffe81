//! Closed-loop compensation.
//!
//! Three LCVRs at 0°, 45° and 0° undo an unknown fiber rotation; a fourth at 45°
//! sits after them and only moves during fine tuning. A coarse step infers the
//! state in front of the compensator from the latest measurement, solves for the
//! three retardances that carry it to the target, maps them to drive voltages and
//! measures again. Once the coarse threshold is met, single-voltage nudges climb
//! the rest of the way.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lcvr::RetardanceCurve;
use crate::linalg::{mat_mul, mat_vec, norm, solve, Mat3, Vec3};
use crate::scalar::Scalar;
use crate::stokes::{fidelity, MuellerMatrix, NormalizedStokes};

/// Fast-axis angles of the four compensator cells, in light-propagation order.
pub const LCVR_ANGLES_DEG: [f64; 4] = [0.0, 45.0, 0.0, 45.0];

/// Lower edge of the physical retardance window, in units of π.
pub const RANGE_LO_PI: f64 = 0.2;

/// Initial retardance of the fourth cell, in units of π (middle of the window).
pub const FOURTH_INITIAL_PI: f64 = 1.2;

const LM_MAX_ITER: usize = 100;
const DEDUP_TOL: f64 = 1e-6;

/// Retardances of the three solving cells, radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetardanceTriple<T> {
    pub d1: T,
    pub d2: T,
    pub d3: T,
}

impl<T: Scalar> RetardanceTriple<T> {
    pub fn new(d1: T, d2: T, d3: T) -> Self {
        Self { d1, d2, d3 }
    }

    pub fn from_array(d: [T; 3]) -> Self {
        Self::new(d[0], d[1], d[2])
    }

    pub fn as_array(&self) -> [T; 3] {
        [self.d1, self.d2, self.d3]
    }

    /// Each component moved into `[0.2π, 2.2π)`.
    pub fn shifted(&self) -> Self {
        Self::new(
            shift_to_range(self.d1),
            shift_to_range(self.d2),
            shift_to_range(self.d3),
        )
    }

    pub fn mueller(&self) -> MuellerMatrix<T> {
        MuellerMatrix::lcvr_triple(self.d1, self.d2, self.d3)
    }
}

/// `d + 2πk` for the integer `k` that lands in `[0.2π, 2.2π)`.
pub fn shift_to_range<T: Scalar>(d: T) -> T {
    let tau = T::TAU();
    let lo = T::lit(RANGE_LO_PI) * T::PI();
    let mut x = d - tau * ((d - lo) / tau).floor();
    // Guard the half-open edges against rounding in the floor above.
    if x >= lo + tau {
        x = x - tau;
    }
    if x < lo {
        x = x + tau;
    }
    x
}

/// Loop thresholds, budgets and solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig<T> {
    pub coarse_threshold: T,
    pub fine_threshold: T,
    pub max_coarse_steps: usize,
    pub max_fine_steps: usize,
    /// Voltage nudge of one fine-tuning move.
    pub fine_step_v: T,
    pub multistart_count: usize,
    pub solver_tolerance: T,
}

impl<T: Scalar> Default for LoopConfig<T> {
    fn default() -> Self {
        Self {
            coarse_threshold: T::lit(0.97),
            fine_threshold: T::lit(0.995),
            max_coarse_steps: 20,
            max_fine_steps: 200,
            fine_step_v: T::lit(0.02),
            multistart_count: 8,
            solver_tolerance: T::lit(1e-10),
        }
    }
}

impl<T: Scalar> LoopConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let (c, f) = (self.coarse_threshold, self.fine_threshold);
        if !(T::zero() < c && c < f && f < T::one()) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < coarse_threshold ({c}) < fine_threshold ({f}) < 1"
            )));
        }
        if self.max_coarse_steps == 0 {
            return Err(Error::InvalidConfig("max_coarse_steps must be >= 1".into()));
        }
        if !(self.fine_step_v > T::zero()) || !self.fine_step_v.is_finite() {
            return Err(Error::InvalidConfig("fine_step_v must be positive".into()));
        }
        if self.multistart_count == 0 {
            return Err(Error::InvalidConfig("multistart_count must be >= 1".into()));
        }
        if !(self.solver_tolerance > T::zero()) {
            return Err(Error::InvalidConfig("solver_tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Rotation block of a retarder at 0°.
fn rot_x<T: Scalar>(d: T) -> (Mat3<T>, Mat3<T>) {
    let (s, c) = d.sin_cos();
    let (o, z) = (T::one(), T::zero());
    (
        [[o, z, z], [z, c, s], [z, -s, c]],
        [[z, z, z], [z, -s, c], [z, -c, -s]],
    )
}

/// Rotation block of a retarder at 45°.
fn rot_y<T: Scalar>(d: T) -> (Mat3<T>, Mat3<T>) {
    let (s, c) = d.sin_cos();
    let (o, z) = (T::one(), T::zero());
    (
        [[c, z, -s], [z, o, z], [s, z, c]],
        [[-s, z, -c], [z, z, z], [c, z, -s]],
    )
}

/// Residual `R(δ)·s − t` and its Jacobian (columns ∂/∂d1, ∂/∂d2, ∂/∂d3).
fn residual_and_jacobian<T: Scalar>(d: &Vec3<T>, s: &Vec3<T>, t: &Vec3<T>) -> (Vec3<T>, Mat3<T>) {
    let (r1, dr1) = rot_x(d[0]);
    let (r2, dr2) = rot_y(d[1]);
    let (r3, dr3) = rot_x(d[2]);
    let a = mat_vec(&r1, s);
    let b = mat_vec(&r2, &a);
    let out = mat_vec(&r3, &b);
    let res = [out[0] - t[0], out[1] - t[1], out[2] - t[2]];
    let r32 = mat_mul(&r3, &r2);
    let j1 = mat_vec(&r32, &mat_vec(&dr1, s));
    let j2 = mat_vec(&r3, &mat_vec(&dr2, &a));
    let j3 = mat_vec(&dr3, &b);
    let mut jac = [[T::zero(); 3]; 3];
    for i in 0..3 {
        jac[i] = [j1[i], j2[i], j3[i]];
    }
    (res, jac)
}

fn cost<T: Scalar>(r: &Vec3<T>) -> T {
    r[0] * r[0] + r[1] * r[1] + r[2] * r[2]
}

/// Levenberg-Marquardt from one start. Returns the final point and residual norm.
fn levenberg_marquardt<T: Scalar>(start: Vec3<T>, s: &Vec3<T>, t: &Vec3<T>, tol: T) -> (Vec3<T>, T) {
    let mut d = start;
    let (mut r, mut jac) = residual_and_jacobian(&d, s, t);
    let mut c = cost(&r);
    let mut lambda = T::lit(1e-3);
    for _ in 0..LM_MAX_ITER {
        if c.sqrt() <= tol {
            break;
        }
        let mut jtj = [[T::zero(); 3]; 3];
        let mut jtr = [T::zero(); 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    jtj[i][j] = jtj[i][j] + jac[k][i] * jac[k][j];
                }
            }
            for k in 0..3 {
                jtr[i] = jtr[i] - jac[k][i] * r[k];
            }
        }
        let mut improved = false;
        while lambda < T::lit(1e12) {
            let mut a = jtj;
            for (i, row) in a.iter_mut().enumerate() {
                row[i] = row[i] + lambda;
            }
            let Some(step) = solve(&a, &jtr) else {
                lambda = lambda * T::lit(10.0);
                continue;
            };
            let trial = [d[0] + step[0], d[1] + step[1], d[2] + step[2]];
            let (r_new, jac_new) = residual_and_jacobian(&trial, s, t);
            let c_new = cost(&r_new);
            if c_new < c {
                d = trial;
                r = r_new;
                jac = jac_new;
                c = c_new;
                lambda = (lambda / T::lit(3.0)).max(T::lit(1e-12));
                improved = true;
                break;
            }
            lambda = lambda * T::lit(4.0);
        }
        if !improved {
            break;
        }
    }
    (d, c.sqrt())
}

/// Norm of `M_LCVRs(δ)·s_dis − s_target` on the polarized components.
pub fn solve_residual<T: Scalar>(
    triple: &RetardanceTriple<T>,
    s_dis: &NormalizedStokes<T>,
    s_target: &NormalizedStokes<T>,
) -> T {
    let out = triple.mueller().apply(&s_dis.to_stokes());
    let t = s_target.as_array();
    norm(&[out.s1 - t[0], out.s2 - t[1], out.s3 - t[2]])
}

/// All distinct shifted solutions found from `multistart_count` random starts.
///
/// Starts are drawn uniformly from `[0, 2π)³`; the number of draws does not depend
/// on how many starts converge.
pub fn solve_candidates<T: Scalar, R: Rng + ?Sized>(
    s_dis: &NormalizedStokes<T>,
    s_target: &NormalizedStokes<T>,
    config: &LoopConfig<T>,
    rng: &mut R,
) -> Result<Vec<RetardanceTriple<T>>> {
    let tau = std::f64::consts::TAU;
    let starts: Vec<Vec3<T>> = (0..config.multistart_count)
        .map(|_| {
            [
                T::lit(rng.random::<f64>() * tau),
                T::lit(rng.random::<f64>() * tau),
                T::lit(rng.random::<f64>() * tau),
            ]
        })
        .collect();
    let (s, t) = (s_dis.as_array(), s_target.as_array());
    let tol = config.solver_tolerance;
    let mut best = T::infinity();
    let mut found: Vec<RetardanceTriple<T>> = Vec::new();
    for start in starts {
        let (d, res) = levenberg_marquardt(start, &s, &t, tol);
        best = best.min(res);
        if !(res <= tol) {
            continue;
        }
        let cand = RetardanceTriple::from_array(d).shifted();
        let dup = found.iter().any(|f| {
            f.as_array()
                .iter()
                .zip(cand.as_array())
                .all(|(a, b)| (*a - b).abs() < T::lit(DEDUP_TOL))
        });
        if !dup {
            found.push(cand);
        }
    }
    if found.is_empty() {
        return Err(Error::SolverFailure {
            attempts: config.multistart_count,
            best_residual: best.as_f64(),
        });
    }
    Ok(found)
}

/// One shifted solution of the three-retardance system (the first one found).
pub fn solve_retardances<T: Scalar, R: Rng + ?Sized>(
    s_dis: &NormalizedStokes<T>,
    s_target: &NormalizedStokes<T>,
    config: &LoopConfig<T>,
    rng: &mut R,
) -> Result<RetardanceTriple<T>> {
    Ok(solve_candidates(s_dis, s_target, config, rng)?[0])
}

/// State in front of the three cells, from a measurement behind them.
pub fn infer_disturbed<T: Scalar>(
    s_meas: &NormalizedStokes<T>,
    current: &RetardanceTriple<T>,
) -> NormalizedStokes<T> {
    // The closed form is exactly orthogonal, so transposing inverts it.
    current.mueller().transpose().rotate(s_meas)
}

/// `(1 − f) / 2`.
pub fn qber_opt<T: Scalar>(f: T) -> Result<T> {
    if !(f >= T::zero() && f <= T::one()) {
        return Err(Error::OutOfBounds {
            value: f.as_f64(),
            min: 0.0,
            max: 1.0,
        });
    }
    Ok((T::one() - f) / T::lit(2.0))
}

/// Sum of the optical, detector and afterpulse/accidental contributions.
pub fn qber_total<T: Scalar>(opt: T, det: T, acc: T) -> Result<T> {
    for v in [opt, det, acc] {
        if !(v >= T::zero()) || !v.is_finite() {
            return Err(Error::OutOfBounds {
                value: v.as_f64(),
                min: 0.0,
                max: f64::INFINITY,
            });
        }
    }
    Ok(opt + det + acc)
}

/// Anything that can set compensator voltages and report the resulting SOP.
pub trait Apparatus<T: Scalar> {
    /// Applies `voltages` (one per cell) and performs one polarization measurement.
    fn measure(&mut self, voltages: &[T]) -> Result<NormalizedStokes<T>>;

    /// Noise-free output state for `voltages`, if the apparatus knows it.
    fn true_state(&self, _voltages: &[T]) -> Option<NormalizedStokes<T>> {
        None
    }
}

impl<T: Scalar, F> Apparatus<T> for F
where
    F: FnMut(&[T]) -> Result<NormalizedStokes<T>>,
{
    fn measure(&mut self, voltages: &[T]) -> Result<NormalizedStokes<T>> {
        self(voltages)
    }
}

/// Retardances the controller believes are applied, and the voltages behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct CompensatorState<T> {
    pub retardances: RetardanceTriple<T>,
    /// Anti-gimbal cell, absent with a three-cell compensator.
    pub fourth_retardance: Option<T>,
    pub voltages: Vec<T>,
}

impl<T: Scalar> CompensatorState<T> {
    /// Reads the retardances off the curves at `voltages`.
    pub fn from_voltages(curves: &[RetardanceCurve<T>], voltages: Vec<T>) -> Result<Self> {
        let d: Vec<T> = curves
            .iter()
            .zip(&voltages)
            .map(|(c, &v)| c.retardance_for_voltage(v))
            .collect::<Result<_>>()?;
        Ok(Self {
            retardances: RetardanceTriple::new(d[0], d[1], d[2]),
            fourth_retardance: d.get(3).copied(),
            voltages,
        })
    }

    fn fourth_matrix(&self) -> Option<MuellerMatrix<T>> {
        self.fourth_retardance
            .map(|d| MuellerMatrix::lcvr(T::FRAC_PI_4(), d))
    }

    /// Full compensator matrix, fourth cell included.
    pub fn mueller(&self) -> MuellerMatrix<T> {
        let m = self.retardances.mueller();
        match self.fourth_matrix() {
            Some(m4) => m4 * m,
            None => m,
        }
    }

    /// Undoes the fourth cell (if any) on a state behind the compensator.
    fn strip_fourth(&self, u: &NormalizedStokes<T>) -> NormalizedStokes<T> {
        match self.fourth_matrix() {
            Some(m4) => m4.transpose().rotate(u),
            None => *u,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    FineThresholdReached,
    BudgetExhausted,
}

/// One measurement of the loop. Step 0 is the measurement before any solve, so a
/// run that starts above a threshold reports 0 steps to it.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord<T> {
    pub step: usize,
    pub phase: Phase,
    pub retardances: RetardanceTriple<T>,
    pub fourth_retardance: Option<T>,
    pub voltages: Vec<T>,
    pub measured: NormalizedStokes<T>,
    /// Fidelity of this measurement with the target.
    pub fidelity: T,
    /// Fidelity of the committed (best so far) setting after this step.
    pub best_fidelity: T,
    /// Fidelity of the noise-free state, when the apparatus can tell.
    pub true_fidelity: Option<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Termination {
    pub reason: TerminationReason,
    pub steps_to_97: Option<usize>,
    pub steps_to_99: Option<usize>,
    pub steps_to_995: Option<usize>,
}

/// Transcript and live state of one compensation.
#[derive(Debug, Clone)]
pub struct CompensationRun<T: Scalar> {
    records: Vec<StepRecord<T>>,
    termination: Option<Termination>,
    target: NormalizedStokes<T>,
    /// Setting currently on the apparatus.
    state: CompensatorState<T>,
    /// Latest measurement together with the setting it was taken at.
    basis: (NormalizedStokes<T>, CompensatorState<T>),
    best: (T, CompensatorState<T>),
    coarse_steps: usize,
    fine_steps: usize,
    fine_cursor: usize,
    fine_direction: Vec<T>,
    rng: ChaCha8Rng,
}

fn check_curves<T: Scalar>(curves: &[RetardanceCurve<T>]) -> Result<()> {
    if !(3..=4).contains(&curves.len()) {
        return Err(Error::InvalidConfig(format!(
            "need 3 or 4 retardance curves, got {}",
            curves.len()
        )));
    }
    Ok(())
}

/// Voltages for arbitrary retardances drawn uniformly from `[0.2π, 2.2π)`.
fn random_voltages<T: Scalar>(curves: &[RetardanceCurve<T>], rng: &mut ChaCha8Rng) -> Vec<T> {
    curves
        .iter()
        .take(3)
        .map(|c| {
            let d = (T::lit(RANGE_LO_PI) + T::lit(2.0 * rng.random::<f64>())) * T::PI();
            c.voltage_for_retardance(d).voltage
        })
        .collect()
}

impl<T: Scalar> CompensationRun<T> {
    /// Puts arbitrary retardances on the first three cells and the fourth at
    /// mid-range, then takes the initial measurement (step 0).
    pub fn start<A: Apparatus<T> + ?Sized>(
        apparatus: &mut A,
        curves: &[RetardanceCurve<T>],
        target: NormalizedStokes<T>,
        config: &LoopConfig<T>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        check_curves(curves)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut voltages = random_voltages(curves, &mut rng);
        if let Some(c4) = curves.get(3) {
            voltages.push(
                c4.voltage_for_retardance(T::lit(FOURTH_INITIAL_PI) * T::PI())
                    .voltage,
            );
        }
        let state = CompensatorState::from_voltages(curves, voltages)?;
        let measured = apparatus.measure(&state.voltages)?;
        let f = fidelity(&measured, &target);
        let n = curves.len();
        let mut run = Self {
            records: Vec::new(),
            termination: None,
            target,
            basis: (measured, state.clone()),
            best: (f, state.clone()),
            state,
            coarse_steps: 0,
            fine_steps: 0,
            fine_cursor: 0,
            fine_direction: vec![T::one(); n],
            rng,
        };
        run.push(apparatus, Phase::Coarse, measured);
        Ok(run)
    }

    pub fn records(&self) -> &[StepRecord<T>] {
        &self.records
    }

    pub fn termination(&self) -> Option<&Termination> {
        self.termination.as_ref()
    }

    pub fn target(&self) -> &NormalizedStokes<T> {
        &self.target
    }

    /// Setting currently applied.
    pub fn state(&self) -> &CompensatorState<T> {
        &self.state
    }

    /// Best measured fidelity so far.
    pub fn best_fidelity(&self) -> T {
        self.best.0
    }

    pub fn is_complete(&self) -> bool {
        self.termination.is_some()
    }

    fn push<A: Apparatus<T> + ?Sized>(&mut self, apparatus: &A, phase: Phase, measured: NormalizedStokes<T>) {
        let f = fidelity(&measured, &self.target);
        let true_fidelity = apparatus
            .true_state(&self.state.voltages)
            .map(|u| fidelity(&u, &self.target));
        self.records.push(StepRecord {
            step: self.records.len(),
            phase,
            retardances: self.state.retardances,
            fourth_retardance: self.state.fourth_retardance,
            voltages: self.state.voltages.clone(),
            measured,
            fidelity: f,
            best_fidelity: self.best.0.max(f),
            true_fidelity,
        });
    }

    /// Measures at the current setting, logs it and commits it if it beats the best.
    /// Returns whether it did.
    fn measure_and_commit<A: Apparatus<T> + ?Sized>(
        &mut self,
        apparatus: &mut A,
        phase: Phase,
    ) -> Result<bool> {
        let measured = apparatus.measure(&self.state.voltages)?;
        self.push(apparatus, phase, measured);
        self.basis = (measured, self.state.clone());
        let f = fidelity(&measured, &self.target);
        if f > self.best.0 {
            self.best = (f, self.state.clone());
            Ok(true)
        } else {
            Ok(false)
        }
    }

    /// Voltages for a solved triple, preferring unclamped lookups and then the
    /// flattest spots on the curves.
    fn pick_voltages(
        &self,
        curves: &[RetardanceCurve<T>],
        candidates: &[RetardanceTriple<T>],
    ) -> Result<Vec<T>> {
        let mut best: Option<(usize, T, Vec<T>)> = None;
        for cand in candidates {
            let mut clamped = 0;
            let mut slope = T::zero();
            let mut volts = Vec::with_capacity(3);
            for (c, d) in curves.iter().zip(cand.as_array()) {
                let hit = c.voltage_for_retardance(d);
                clamped += hit.clamped as usize;
                slope = slope + c.slope_at(hit.voltage)?.abs();
                volts.push(hit.voltage);
            }
            let better = match &best {
                None => true,
                Some((bc, bs, _)) => clamped < *bc || (clamped == *bc && slope < *bs),
            };
            if better {
                best = Some((clamped, slope, volts));
            }
        }
        Ok(best.expect("at least one candidate").2)
    }

    /// One coarse cycle: infer, solve, actuate, measure.
    ///
    /// A solver failure puts fresh arbitrary retardances on the three cells instead.
    /// A measurement that does not beat the best so far restores the best setting
    /// for the next cycle, whose inference still starts from that measurement.
    pub fn coarse_step<A: Apparatus<T> + ?Sized>(
        &mut self,
        apparatus: &mut A,
        curves: &[RetardanceCurve<T>],
        config: &LoopConfig<T>,
    ) -> Result<()> {
        check_curves(curves)?;
        let (meas, at) = &self.basis;
        let behind_three = at.strip_fourth(meas);
        let goal = at.strip_fourth(&self.target);
        let s_dis = infer_disturbed(&behind_three, &at.retardances);
        let mut voltages = match solve_candidates(&s_dis, &goal, config, &mut self.rng) {
            Ok(cands) => self.pick_voltages(curves, &cands)?,
            Err(Error::SolverFailure {
                attempts,
                best_residual,
            }) => {
                log::debug!("solver failed after {attempts} starts (residual {best_residual:e})");
                random_voltages(curves, &mut self.rng)
            }
            Err(e) => return Err(e),
        };
        voltages.extend(at.voltages.iter().skip(3));
        self.state = CompensatorState::from_voltages(curves, voltages)?;
        self.coarse_steps += 1;
        if !self.measure_and_commit(apparatus, Phase::Coarse)? {
            self.state = self.best.1.clone();
        }
        Ok(())
    }

    /// One coordinate-descent move on the current cell's voltage.
    ///
    /// The move goes in the cell's last successful direction. On improvement the
    /// cell keeps the move and stays selected; otherwise the voltage is reverted,
    /// the cell's direction is reversed for its next turn and the next cell is
    /// selected. A no-op that marks the run complete once the best fidelity is at
    /// the fine threshold.
    pub fn fine_tune_step<A: Apparatus<T> + ?Sized>(
        &mut self,
        apparatus: &mut A,
        curves: &[RetardanceCurve<T>],
        config: &LoopConfig<T>,
    ) -> Result<()> {
        check_curves(curves)?;
        if self.best.0 >= config.fine_threshold {
            self.finish(TerminationReason::FineThresholdReached, config);
            return Ok(());
        }
        let i = self.fine_cursor;
        let old = self.state.voltages[i];
        let mut v = curves[i].clamp_voltage(old + self.fine_direction[i] * config.fine_step_v);
        if v == old {
            // Pinned at the end of the curve: go the other way.
            self.fine_direction[i] = -self.fine_direction[i];
            v = curves[i].clamp_voltage(old + self.fine_direction[i] * config.fine_step_v);
        }
        let mut voltages = self.state.voltages.clone();
        voltages[i] = v;
        self.state = CompensatorState::from_voltages(curves, voltages)?;
        self.fine_steps += 1;
        if !self.measure_and_commit(apparatus, Phase::Fine)? {
            self.state = self.best.1.clone();
            self.fine_direction[i] = -self.fine_direction[i];
            self.fine_cursor = (i + 1) % curves.len();
        }
        if self.best.0 >= config.fine_threshold {
            self.finish(TerminationReason::FineThresholdReached, config);
        }
        Ok(())
    }

    fn first_reaching(&self, threshold: f64) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.fidelity >= T::lit(threshold))
            .map(|r| r.step)
    }

    fn finish(&mut self, reason: TerminationReason, _config: &LoopConfig<T>) {
        if self.termination.is_none() {
            self.termination = Some(Termination {
                reason,
                steps_to_97: self.first_reaching(0.97),
                steps_to_99: self.first_reaching(0.99),
                steps_to_995: self.first_reaching(0.995),
            });
        }
    }
}

/// Runs the coarse loop to the coarse threshold and then fine tuning to the fine
/// threshold, each within its step budget. The initial setting is arbitrary, so at
/// least one coarse cycle always runs.
pub fn run_compensation<T: Scalar, A: Apparatus<T> + ?Sized>(
    apparatus: &mut A,
    curves: &[RetardanceCurve<T>],
    target: NormalizedStokes<T>,
    config: &LoopConfig<T>,
    seed: u64,
) -> Result<CompensationRun<T>> {
    let mut run = CompensationRun::start(apparatus, curves, target, config, seed)?;
    loop {
        run.coarse_step(apparatus, curves, config)?;
        if run.best.0 >= config.coarse_threshold || run.coarse_steps >= config.max_coarse_steps {
            break;
        }
    }
    if run.best.0 < config.coarse_threshold {
        run.finish(TerminationReason::BudgetExhausted, config);
        return Ok(run);
    }
    while !run.is_complete() && run.fine_steps < config.max_fine_steps {
        run.fine_tune_step(apparatus, curves, config)?;
    }
    if run.best.0 >= config.fine_threshold {
        run.finish(TerminationReason::FineThresholdReached, config);
    } else {
        run.finish(TerminationReason::BudgetExhausted, config);
    }
    Ok(run)
}

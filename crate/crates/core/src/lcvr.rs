//! Liquid-crystal variable retarder characterization.
//!
//! The characterization setup (PBS, LCVR at 45°, HWP at 45°, PBS) transmits
//! `I = I_max (1 − cos δ)/2`, so each drive voltage yields a retardance folded into
//! `[0, π]` by the arccos. [`unwrap_retardance`] undoes the folds and
//! [`build_curve`] turns a full sweep into a [`RetardanceCurve`] that can be queried
//! in both directions.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default distance to 0 or π inside which a fold may be declared, radians.
pub const DEFAULT_FOLD_THRESHOLD: f64 = 0.15;

/// Fewest sweep points accepted.
pub const MIN_SWEEP_POINTS: usize = 10;

/// Drive-voltage granularity of the lab sweep, volts.
pub const LAB_VOLTAGE_STEP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint<T> {
    pub drive_voltage_rms: T,
    pub mean_pd_voltage: T,
    pub pd_voltage_sem: T,
}

/// Detector readings over a drive-voltage sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct CharacterizationSweep<T> {
    points: Vec<SweepPoint<T>>,
    background_voltage: T,
    background_sem: T,
}

impl<T: Scalar> CharacterizationSweep<T> {
    pub fn new(points: Vec<SweepPoint<T>>, background_voltage: T, background_sem: T) -> Result<Self> {
        if points.len() < MIN_SWEEP_POINTS {
            return Err(Error::InvalidSweep(format!(
                "{} points, need at least {MIN_SWEEP_POINTS}",
                points.len()
            )));
        }
        for (i, p) in points.iter().enumerate() {
            let finite = p.drive_voltage_rms.is_finite()
                && p.mean_pd_voltage.is_finite()
                && p.pd_voltage_sem.is_finite();
            if !finite || p.pd_voltage_sem < T::zero() {
                return Err(Error::InvalidSweep(format!("invalid point at index {i}")));
            }
        }
        if let Some(i) = points
            .windows(2)
            .position(|w| !(w[1].drive_voltage_rms > w[0].drive_voltage_rms))
        {
            return Err(Error::InvalidSweep(format!(
                "drive voltages not strictly increasing at index {}",
                i + 1
            )));
        }
        if !background_voltage.is_finite() || !(background_sem >= T::zero()) {
            return Err(Error::InvalidSweep("invalid background".into()));
        }
        Ok(Self {
            points,
            background_voltage,
            background_sem,
        })
    }

    pub fn points(&self) -> &[SweepPoint<T>] {
        &self.points
    }

    pub fn background_voltage(&self) -> T {
        self.background_voltage
    }

    pub fn background_sem(&self) -> T {
        self.background_sem
    }

    /// Median spacing of the drive voltages.
    pub fn voltage_step(&self) -> T {
        let mut steps: Vec<T> = self
            .points
            .windows(2)
            .map(|w| w[1].drive_voltage_rms - w[0].drive_voltage_rms)
            .collect();
        steps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        steps[steps.len() / 2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint<T> {
    pub drive_voltage_rms: T,
    pub retardance: T,
    /// `None` where error propagation is undefined (clamped or endpoint readings).
    pub retardance_error: Option<T>,
}

/// Calibrated voltage ↔ retardance relation of one LCVR.
#[derive(Debug, Clone, PartialEq)]
pub struct RetardanceCurve<T> {
    points: Vec<CurvePoint<T>>,
    voltage_step: T,
}

/// Result of a reverse lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoltageLookup<T> {
    pub voltage: T,
    /// Set when the target lies outside the curve's retardance span and the
    /// endpoint voltage was returned instead.
    pub clamped: bool,
}

impl<T: Scalar> RetardanceCurve<T> {
    pub fn new(points: Vec<CurvePoint<T>>, voltage_step: T) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidCurve("need at least two points".into()));
        }
        if !(voltage_step > T::zero()) {
            return Err(Error::InvalidCurve("voltage step must be positive".into()));
        }
        if points
            .iter()
            .any(|p| !p.drive_voltage_rms.is_finite() || !p.retardance.is_finite())
        {
            return Err(Error::InvalidCurve("non-finite point".into()));
        }
        if let Some(i) = points
            .windows(2)
            .position(|w| !(w[1].drive_voltage_rms > w[0].drive_voltage_rms))
        {
            return Err(Error::InvalidCurve(format!(
                "drive voltages not strictly increasing at index {}",
                i + 1
            )));
        }
        Ok(Self { points, voltage_step })
    }

    /// Samples `f` on `[v_start, v_end]` at `step`.
    pub fn from_fn(v_start: T, v_end: T, step: T, f: impl Fn(T) -> T) -> Result<Self> {
        let n = ((v_end - v_start) / step + T::lit(1e-9))
            .floor()
            .to_usize()
            .unwrap_or(0)
            + 1;
        let points = (0..n)
            .map(|i| {
                let v = v_start + T::from_usize(i).unwrap() * step;
                CurvePoint {
                    drive_voltage_rms: v,
                    retardance: f(v),
                    retardance_error: None,
                }
            })
            .collect();
        Self::new(points, step)
    }

    pub fn points(&self) -> &[CurvePoint<T>] {
        &self.points
    }

    /// Drive-voltage granularity the curve was measured with.
    pub fn voltage_step(&self) -> T {
        self.voltage_step
    }

    pub fn voltage_range(&self) -> (T, T) {
        (
            self.points[0].drive_voltage_rms,
            self.points[self.points.len() - 1].drive_voltage_rms,
        )
    }

    pub fn retardance_range(&self) -> (T, T) {
        self.points
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), p| {
                (lo.min(p.retardance), hi.max(p.retardance))
            })
    }

    /// Whether retardance never increases with voltage.
    pub fn is_non_increasing(&self) -> bool {
        self.points.windows(2).all(|w| w[1].retardance <= w[0].retardance)
    }

    pub fn clamp_voltage(&self, v: T) -> T {
        let (lo, hi) = self.voltage_range();
        v.max(lo).min(hi)
    }

    /// Index of the segment `[i, i+1]` containing `v` (which must be in range).
    fn segment(&self, v: T) -> usize {
        let idx = self.points.partition_point(|p| p.drive_voltage_rms <= v);
        idx.saturating_sub(1).min(self.points.len() - 2)
    }

    fn check_range(&self, v: T) -> Result<()> {
        let (lo, hi) = self.voltage_range();
        let slack = self.voltage_step * T::lit(1e-9);
        if !(v >= lo - slack && v <= hi + slack) {
            return Err(Error::OutOfRange {
                voltage: v.as_f64(),
                min: lo.as_f64(),
                max: hi.as_f64(),
            });
        }
        Ok(())
    }

    /// Piecewise-linear retardance at drive voltage `v`.
    pub fn retardance_for_voltage(&self, v: T) -> Result<T> {
        self.check_range(v)?;
        let v = self.clamp_voltage(v);
        let i = self.segment(v);
        let (a, b) = (&self.points[i], &self.points[i + 1]);
        if v == a.drive_voltage_rms {
            return Ok(a.retardance);
        }
        if v == b.drive_voltage_rms {
            return Ok(b.retardance);
        }
        let t = (v - a.drive_voltage_rms) / (b.drive_voltage_rms - a.drive_voltage_rms);
        Ok(a.retardance + t * (b.retardance - a.retardance))
    }

    /// Slope `dδ/dV` of the segment containing `v`.
    pub fn slope_at(&self, v: T) -> Result<T> {
        self.check_range(v)?;
        let i = self.segment(self.clamp_voltage(v));
        let (a, b) = (&self.points[i], &self.points[i + 1]);
        Ok((b.retardance - a.retardance) / (b.drive_voltage_rms - a.drive_voltage_rms))
    }

    /// Drive voltage whose interpolated retardance is nearest to `target`.
    ///
    /// Segments are searched from the lowest voltage up, so on a non-monotone curve
    /// the lowest matching voltage wins. Targets outside the retardance span return
    /// the nearest endpoint knot with `clamped` set.
    pub fn voltage_for_retardance(&self, target: T) -> VoltageLookup<T> {
        for w in self.points.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            if target == a.retardance {
                return VoltageLookup {
                    voltage: a.drive_voltage_rms,
                    clamped: false,
                };
            }
            let (lo, hi) = if a.retardance <= b.retardance {
                (a.retardance, b.retardance)
            } else {
                (b.retardance, a.retardance)
            };
            if target >= lo && target <= hi {
                if target == b.retardance {
                    return VoltageLookup {
                        voltage: b.drive_voltage_rms,
                        clamped: false,
                    };
                }
                let t = (target - a.retardance) / (b.retardance - a.retardance);
                return VoltageLookup {
                    voltage: a.drive_voltage_rms + t * (b.drive_voltage_rms - a.drive_voltage_rms),
                    clamped: false,
                };
            }
        }
        let nearest = self
            .points
            .iter()
            .min_by(|a, b| {
                (a.retardance - target)
                    .abs()
                    .partial_cmp(&(b.retardance - target).abs())
                    .unwrap()
            })
            .expect("curve has points");
        VoltageLookup {
            voltage: nearest.drive_voltage_rms,
            clamped: true,
        }
    }
}

/// Retardance from a background-corrected detector reading, with a flag telling
/// whether the arccos argument had to be clamped into `[−1, 1]`.
pub fn retardance_from_intensity_flagged<T: Scalar>(v_meas: T, v_back: T, v_max: T) -> Result<(T, bool)> {
    if !(v_max > v_back) {
        return Err(Error::Calibration {
            v_max: v_max.as_f64(),
            v_back: v_back.as_f64(),
        });
    }
    let arg = T::one() - T::lit(2.0) * (v_meas - v_back) / (v_max - v_back);
    let one = T::one();
    let clamped = !(arg >= -one && arg <= one);
    let arg = if arg.is_nan() { one } else { arg.max(-one).min(one) };
    Ok((arg.acos(), clamped))
}

/// `arccos(1 − 2(V_meas − V_back)/(V_max − V_back))`, always in `[0, π]`.
pub fn retardance_from_intensity<T: Scalar>(v_meas: T, v_back: T, v_max: T) -> Result<T> {
    retardance_from_intensity_flagged(v_meas, v_back, v_max).map(|(d, _)| d)
}

/// Propagated retardance uncertainty
/// `sqrt((σ_meas² + σ_back²) / ((V_meas − V_back)(V_max − V_meas)))`.
///
/// The uncertainty of `V_max` is not propagated. Undefined at and beyond the
/// endpoints `V_back` and `V_max`.
pub fn retardance_error<T: Scalar>(v_meas: T, v_back: T, v_max: T, sem_meas: T, sem_back: T) -> Result<T> {
    if !(v_max > v_back) {
        return Err(Error::Calibration {
            v_max: v_max.as_f64(),
            v_back: v_back.as_f64(),
        });
    }
    if !(v_meas > v_back && v_meas < v_max) {
        return Err(Error::Endpoint {
            v_meas: v_meas.as_f64(),
        });
    }
    let num = sem_meas * sem_meas + sem_back * sem_back;
    Ok((num / ((v_meas - v_back) * (v_max - v_meas))).sqrt())
}

/// Kind of arccos fold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FoldKind {
    /// The underlying retardance crossed an even multiple of π (raw value near 0).
    Low,
    /// The underlying retardance crossed an odd multiple of π (raw value near π).
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fold {
    /// Last index still on the pre-fold branch.
    pub index: usize,
    pub kind: FoldKind,
}

/// Unwrapped sequence plus the folds that were undone.
#[derive(Debug, Clone, PartialEq)]
pub struct Unwrapped<T> {
    pub values: Vec<T>,
    pub folds: Vec<Fold>,
}

/// [`unwrap_retardance_with`] at the default fold threshold.
pub fn unwrap_retardance<T: Scalar>(raw: &[T]) -> Result<Unwrapped<T>> {
    unwrap_retardance_with(raw, T::lit(DEFAULT_FOLD_THRESHOLD))
}

/// Undoes arccos folds in a sequence of raw retardances in `[0, π]`.
///
/// Every output value is `±raw[i] + 2πk`. The first point stays on the principal
/// branch. A fold is declared once per excursion into a boundary zone (within
/// `threshold` of 0 or π, left again only beyond `2·threshold`), at the extremum
/// of the excursion, when the sequence enters the zone and leaves it again; the
/// branch is reflected there.
pub fn unwrap_retardance_with<T: Scalar>(raw: &[T], threshold: T) -> Result<Unwrapped<T>> {
    let n = raw.len();
    if n < 3 {
        return Err(Error::UnwrapAmbiguity {
            index: 0,
            reason: format!("need at least 3 points, got {n}"),
        });
    }
    let pi = T::PI();
    let eps = T::tol(1e-12);
    if let Some(i) = raw
        .iter()
        .position(|r| !r.is_finite() || *r < -eps || *r > pi + eps)
    {
        return Err(Error::UnwrapAmbiguity {
            index: i,
            reason: "raw retardance outside [0, π]".into(),
        });
    }
    let half_pi = T::FRAC_PI_2();
    if let Some(i) = raw.windows(2).position(|w| (w[1] - w[0]).abs() >= half_pi) {
        return Err(Error::UnwrapAmbiguity {
            index: i + 1,
            reason: "consecutive samples differ by π/2 or more; sampling too coarse".into(),
        });
    }
    let (lo, hi) = raw.iter().fold((T::infinity(), T::neg_infinity()), |(a, b), &r| {
        (a.min(r), b.max(r))
    });
    let exit = threshold + threshold;
    if hi - lo < T::tol(1e-9) || hi < exit || lo > pi - exit {
        return Err(Error::UnwrapAmbiguity {
            index: 0,
            reason: "no resolvable retardance variation".into(),
        });
    }

    let folds = detect_folds(raw, threshold);

    let mut values = Vec::with_capacity(n);
    let mut offset = T::zero();
    let mut sign = T::one();
    let mut next = folds.iter().peekable();
    for (i, &r) in raw.iter().enumerate() {
        values.push(offset + sign * r);
        if let Some(f) = next.next_if(|f| f.index == i) {
            if f.kind == FoldKind::High {
                offset = offset + T::lit(2.0) * sign * pi;
            }
            sign = -sign;
        }
    }

    if let Some(i) = values.windows(2).position(|w| (w[1] - w[0]).abs() >= half_pi) {
        return Err(Error::UnwrapAmbiguity {
            index: i + 1,
            reason: "unwrapped sequence is discontinuous".into(),
        });
    }
    Ok(Unwrapped { values, folds })
}

fn detect_folds<T: Scalar>(raw: &[T], threshold: T) -> Vec<Fold> {
    let pi = T::PI();
    let n = raw.len();
    let exit = threshold + threshold;
    // Distance to the boundary of the given kind.
    let dist = |r: T, kind: FoldKind| match kind {
        FoldKind::Low => r,
        FoldKind::High => pi - r,
    };

    let mut folds = Vec::new();
    let mut i = 0;
    while i < n {
        let kind = if raw[i] <= threshold {
            FoldKind::Low
        } else if raw[i] >= pi - threshold {
            FoldKind::High
        } else {
            i += 1;
            continue;
        };
        let start = i;
        let mut extremum = i;
        let mut j = i;
        while j < n && dist(raw[j], kind) <= exit {
            if dist(raw[j], kind) < dist(raw[extremum], kind) {
                extremum = j;
            }
            j += 1;
        }
        // An excursion that touches a sequence end only counts if it turns around
        // before that end.
        let d_ext = dist(raw[extremum], kind);
        let left = start > 0 || (extremum > 0 && dist(raw[0], kind) > d_ext);
        let right = j < n || (extremum < n - 1 && dist(raw[n - 1], kind) > d_ext);
        let is_fold = left && right;
        if is_fold {
            // The boundary was crossed on the side of the closer neighbour.
            let index = if dist(raw[extremum - 1], kind) < dist(raw[extremum + 1], kind) {
                extremum - 1
            } else {
                extremum
            };
            folds.push(Fold { index, kind });
        }
        i = j;
    }
    folds
}

/// A built curve with diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Characterization<T> {
    pub curve: RetardanceCurve<T>,
    pub folds: Vec<Fold>,
    /// Per-point flag: arccos argument was clamped.
    pub clamped: Vec<bool>,
    pub v_max: T,
}

/// Builds the retardance curve of a sweep.
///
/// `V_max` is the largest mean detector reading. After unwrapping the curve is
/// oriented to decrease with voltage and shifted by a multiple of 2π so that the
/// highest-voltage point lies in `[0, 2π)`.
pub fn build_curve<T: Scalar>(sweep: &CharacterizationSweep<T>) -> Result<Characterization<T>> {
    let v_back = sweep.background_voltage;
    let v_max = sweep
        .points
        .iter()
        .map(|p| p.mean_pd_voltage)
        .fold(T::neg_infinity(), T::max);
    let mut raw = Vec::with_capacity(sweep.points.len());
    let mut clamped = Vec::with_capacity(sweep.points.len());
    for p in &sweep.points {
        let (d, c) = retardance_from_intensity_flagged(p.mean_pd_voltage, v_back, v_max)?;
        raw.push(d);
        clamped.push(c);
    }
    let unwrapped = unwrap_retardance(&raw)?;
    let mut values = unwrapped.values;

    let n = values.len();
    if values[n - 1] > values[0] {
        values.iter_mut().for_each(|v| *v = -*v);
    }
    let tau = T::TAU();
    let shift = tau * (values[n - 1] / tau).floor();
    values.iter_mut().for_each(|v| *v = *v - shift);

    let points = sweep
        .points
        .iter()
        .zip(&values)
        .zip(&clamped)
        .map(|((p, &d), &c)| CurvePoint {
            drive_voltage_rms: p.drive_voltage_rms,
            retardance: d,
            retardance_error: if c {
                None
            } else {
                retardance_error(
                    p.mean_pd_voltage,
                    v_back,
                    v_max,
                    p.pd_voltage_sem,
                    sweep.background_sem,
                )
                .ok()
            },
        })
        .collect();
    Ok(Characterization {
        curve: RetardanceCurve::new(points, sweep.voltage_step())?,
        folds: unwrapped.folds,
        clamped,
        v_max,
    })
}

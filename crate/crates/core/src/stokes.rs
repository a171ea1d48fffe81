//! Stokes vectors and Mueller matrices.
//!
//! Stokes vectors are columns `(S0, S1, S2, S3)`; a Mueller matrix acts on them from
//! the left. `S3 = +1` is right-hand circular. Angles are radians and measured between
//! an element's fast axis and the horizontal.

use std::fmt;
use std::ops::{Index, Mul};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Four-component polarization state.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StokesVector<T> {
    pub s0: T,
    pub s1: T,
    pub s2: T,
    pub s3: T,
}

impl<T: Scalar> StokesVector<T> {
    pub const fn new(s0: T, s1: T, s2: T, s3: T) -> Self {
        Self { s0, s1, s2, s3 }
    }

    /// Builds a vector and checks `s0 >= 0` and the degree-of-polarization bound.
    pub fn checked(s0: T, s1: T, s2: T, s3: T) -> Result<Self> {
        let s = Self::new(s0, s1, s2, s3);
        if !s.as_array().iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidStokes("non-finite component".into()));
        }
        if s0 < T::zero() {
            return Err(Error::InvalidStokes(format!("s0 = {s0} is negative")));
        }
        let p2 = s.polarized_norm_sqr();
        if p2 > s0 * s0 * (T::one() + T::tol(1e-9)) {
            return Err(Error::InvalidStokes(format!(
                "polarized part {} exceeds s0 = {s0}",
                p2.sqrt()
            )));
        }
        Ok(s)
    }

    pub fn from_array(a: [T; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn as_array(&self) -> [T; 4] {
        [self.s0, self.s1, self.s2, self.s3]
    }

    pub fn scaled(&self, k: T) -> Self {
        Self::new(self.s0 * k, self.s1 * k, self.s2 * k, self.s3 * k)
    }

    fn polarized_norm_sqr(&self) -> T {
        self.s1 * self.s1 + self.s2 * self.s2 + self.s3 * self.s3
    }

    /// `sqrt(S1² + S2² + S3²)`.
    pub fn polarized_norm(&self) -> T {
        self.polarized_norm_sqr().sqrt()
    }

    /// Polarized fraction `sqrt(S1² + S2² + S3²) / S0`.
    pub fn degree_of_polarization(&self) -> Result<T> {
        if !(self.s0 > T::zero()) {
            return Err(Error::NonPositiveIntensity(self.s0.as_f64()));
        }
        Ok(self.polarized_norm() / self.s0)
    }

    /// Divides `S1..S3` by the polarized magnitude (not by `S0`), which makes the
    /// result independent of any detector gain.
    pub fn normalize(&self) -> Result<NormalizedStokes<T>> {
        NormalizedStokes::from_components(self.s1, self.s2, self.s3)
    }
}

/// Point on the Poincaré sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedStokes<T> {
    u: [T; 3],
}

impl<T: Scalar> NormalizedStokes<T> {
    /// Accepts an already unit-norm triple.
    pub fn new(u1: T, u2: T, u3: T) -> Result<Self> {
        let norm = (u1 * u1 + u2 * u2 + u3 * u3).sqrt();
        if !norm.is_finite() || (norm - T::one()).abs() > T::tol(1e-9) {
            return Err(Error::NotNormalized { norm: norm.as_f64() });
        }
        Ok(Self { u: [u1, u2, u3] })
    }

    /// Scales an arbitrary non-zero triple onto the unit sphere.
    pub fn from_components(x: T, y: T, z: T) -> Result<Self> {
        let norm = (x * x + y * y + z * z).sqrt();
        if !(norm > T::zero()) || !norm.is_finite() {
            return Err(Error::Degenerate);
        }
        Ok(Self {
            u: [x / norm, y / norm, z / norm],
        })
    }

    pub fn u1(&self) -> T {
        self.u[0]
    }

    pub fn u2(&self) -> T {
        self.u[1]
    }

    pub fn u3(&self) -> T {
        self.u[2]
    }

    pub fn as_array(&self) -> [T; 3] {
        self.u
    }

    /// Fully polarized Stokes vector with unit intensity.
    pub fn to_stokes(&self) -> StokesVector<T> {
        StokesVector::new(T::one(), self.u[0], self.u[1], self.u[2])
    }

    pub fn dot(&self, other: &Self) -> T {
        self.u[0] * other.u[0] + self.u[1] * other.u[1] + self.u[2] * other.u[2]
    }

    /// Euclidean distance between the two points on the sphere.
    pub fn distance(&self, other: &Self) -> T {
        let d = [
            self.u[0] - other.u[0],
            self.u[1] - other.u[1],
            self.u[2] - other.u[2],
        ];
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    }
}

/// Fidelity `(1 + a·b) / 2` of two fully polarized states.
pub fn fidelity<T: Scalar>(a: &NormalizedStokes<T>, b: &NormalizedStokes<T>) -> T {
    let half = T::lit(0.5);
    (half * (T::one() + a.dot(b))).max(T::zero()).min(T::one())
}

/// The six cardinal states on the Poincaré sphere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CardinalState {
    H,
    V,
    D,
    A,
    R,
    L,
}

impl CardinalState {
    pub const ALL: [CardinalState; 6] = [Self::H, Self::V, Self::D, Self::A, Self::R, Self::L];

    pub fn stokes<T: Scalar>(self) -> StokesVector<T> {
        let (o, z) = (T::one(), T::zero());
        match self {
            Self::H => StokesVector::new(o, o, z, z),
            Self::V => StokesVector::new(o, -o, z, z),
            Self::D => StokesVector::new(o, z, o, z),
            Self::A => StokesVector::new(o, z, -o, z),
            Self::R => StokesVector::new(o, z, z, o),
            Self::L => StokesVector::new(o, z, z, -o),
        }
    }

    pub fn normalized<T: Scalar>(self) -> NormalizedStokes<T> {
        let s = self.stokes::<T>();
        NormalizedStokes {
            u: [s.s1, s.s2, s.s3],
        }
    }
}

impl fmt::Display for CardinalState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            Self::H => "H",
            Self::V => "V",
            Self::D => "D",
            Self::A => "A",
            Self::R => "R",
            Self::L => "L",
        };
        f.write_str(c)
    }
}

impl FromStr for CardinalState {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_uppercase().as_str() {
            "H" => Ok(Self::H),
            "V" => Ok(Self::V),
            "D" => Ok(Self::D),
            "A" => Ok(Self::A),
            "R" => Ok(Self::R),
            "L" => Ok(Self::L),
            other => Err(format!("unknown polarization state '{other}'")),
        }
    }
}

/// 4×4 real matrix acting on Stokes vectors, indexed `m[row][col]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuellerMatrix<T> {
    m: [[T; 4]; 4],
}

impl<T: Scalar> MuellerMatrix<T> {
    pub fn from_rows(m: [[T; 4]; 4]) -> Self {
        Self { m }
    }

    pub fn rows(&self) -> &[[T; 4]; 4] {
        &self.m
    }

    pub fn identity() -> Self {
        let mut m = [[T::zero(); 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = T::one();
        }
        Self { m }
    }

    /// Embeds a 3×3 rotation of the Poincaré sphere as a lossless retarder.
    pub fn from_rotation(r: [[T; 3]; 3]) -> Self {
        let mut m = Self::identity().m;
        for i in 0..3 {
            for j in 0..3 {
                m[i + 1][j + 1] = r[i][j];
            }
        }
        Self { m }
    }

    /// Lower-right 3×3 block.
    pub fn rotation_block(&self) -> [[T; 3]; 3] {
        let mut r = [[T::zero(); 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = self.m[i + 1][j + 1];
            }
        }
        r
    }

    /// Quarter-wave plate with fast axis at `phi`.
    pub fn qwp(phi: T) -> Self {
        let (s, c) = (phi + phi).sin_cos();
        let (o, z) = (T::one(), T::zero());
        Self::from_rows([
            [o, z, z, z],
            [z, c * c, s * c, -s],
            [z, s * c, s * s, c],
            [z, s, -c, z],
        ])
    }

    /// Half-wave plate with fast axis at `phi`.
    pub fn hwp(phi: T) -> Self {
        let (s, c) = (phi + phi).sin_cos();
        let (o, z) = (T::one(), T::zero());
        let two = T::lit(2.0);
        Self::from_rows([
            [o, z, z, z],
            [z, c * c - s * s, two * c * s, z],
            [z, two * c * s, s * s - c * c, z],
            [z, z, z, -o],
        ])
    }

    /// Polarizing beam splitter, transmitted (horizontal) port.
    pub fn pbs() -> Self {
        let (h, z) = (T::lit(0.5), T::zero());
        Self::from_rows([[h, h, z, z], [h, h, z, z], [z; 4], [z; 4]])
    }

    /// Linear retarder with fast axis at `theta` and retardance `delta`.
    pub fn lcvr(theta: T, delta: T) -> Self {
        let (s, c) = (theta + theta).sin_cos();
        let (sd, cd) = delta.sin_cos();
        let (o, z) = (T::one(), T::zero());
        Self::from_rows([
            [o, z, z, z],
            [z, c * c + s * s * cd, c * s * (o - cd), -s * sd],
            [z, c * s * (o - cd), c * c * cd + s * s, c * sd],
            [z, s * sd, -c * sd, cd],
        ])
    }

    /// Three retarders at 0°, 45° and 0° with retardances `d1`, `d2`, `d3`
    /// (light meets `d1` first), in closed form.
    pub fn lcvr_triple(d1: T, d2: T, d3: T) -> Self {
        let (s1, c1) = d1.sin_cos();
        let (s2, c2) = d2.sin_cos();
        let (s3, c3) = d3.sin_cos();
        let (o, z) = (T::one(), T::zero());
        Self::from_rows([
            [o, z, z, z],
            [z, c2, s1 * s2, -c1 * s2],
            [z, s2 * s3, c1 * c3 - c2 * s1 * s3, c3 * s1 + c1 * c2 * s3],
            [z, c3 * s2, -c2 * c3 * s1 - c1 * s3, -s1 * s3 + c1 * c2 * c3],
        ])
    }

    pub fn transpose(&self) -> Self {
        let mut m = self.m;
        for (i, row) in m.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = self.m[j][i];
            }
        }
        Self { m }
    }

    pub fn apply(&self, s: &StokesVector<T>) -> StokesVector<T> {
        let v = s.as_array();
        let row = |r: &[T; 4]| r[0] * v[0] + r[1] * v[1] + r[2] * v[2] + r[3] * v[3];
        StokesVector::new(row(&self.m[0]), row(&self.m[1]), row(&self.m[2]), row(&self.m[3]))
    }

    /// Applies the rotation block to a point on the sphere and renormalizes.
    pub fn rotate(&self, u: &NormalizedStokes<T>) -> NormalizedStokes<T> {
        let out = self.apply(&u.to_stokes());
        // Retarders keep |u| = 1 up to rounding; renormalizing cannot fail.
        NormalizedStokes::from_components(out.s1, out.s2, out.s3)
            .expect("retarder maps unit vectors to non-zero vectors")
    }

    /// Whether the matrix is a lossless retarder: unit `m00`, zero first row and
    /// column otherwise, orthogonal lower block.
    pub fn is_retarder(&self, tol: T) -> bool {
        self.retarder_defect() <= tol
    }

    fn retarder_defect(&self) -> T {
        let mut worst = (self.m[0][0] - T::one()).abs();
        for k in 1..4 {
            worst = worst.max(self.m[0][k].abs()).max(self.m[k][0].abs());
        }
        let r = self.rotation_block();
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = T::zero();
                for k in 0..3 {
                    dot = dot + r[k][i] * r[k][j];
                }
                let expect = if i == j { T::one() } else { T::zero() };
                worst = worst.max((dot - expect).abs());
            }
        }
        worst
    }

    /// Inverse of a retarder matrix via the transpose of its orthogonal block.
    pub fn invert_retarder(&self) -> Result<Self> {
        let defect = self.retarder_defect();
        if !(defect <= T::tol(1e-9)) {
            return Err(Error::NotRetarder(format!(
                "orthogonality defect {:e} exceeds tolerance",
                defect.as_f64()
            )));
        }
        Ok(Self::from_rotation(self.rotation_block()).transpose())
    }

    /// Largest absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        let mut worst = T::zero();
        for i in 0..4 {
            for j in 0..4 {
                worst = worst.max((self.m[i][j] - other.m[i][j]).abs());
            }
        }
        worst
    }
}

impl<T: Scalar> Index<(usize, usize)> for MuellerMatrix<T> {
    type Output = T;

    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.m[r][c]
    }
}

impl<T: Scalar> Mul for MuellerMatrix<T> {
    type Output = Self;

    fn mul(self, rhs: Self) -> Self {
        let mut out = [[T::zero(); 4]; 4];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                let mut acc = T::zero();
                for k in 0..4 {
                    acc = acc + self.m[i][k] * rhs.m[k][j];
                }
                *x = acc;
            }
        }
        Self { m: out }
    }
}

impl<T: Scalar> Mul<StokesVector<T>> for MuellerMatrix<T> {
    type Output = StokesVector<T>;

    fn mul(self, rhs: StokesVector<T>) -> StokesVector<T> {
        self.apply(&rhs)
    }
}

/// System matrix of elements listed in propagation order: returns `M_n · … · M_1`.
pub fn compose<T: Scalar>(elements: &[MuellerMatrix<T>]) -> Result<MuellerMatrix<T>> {
    let (first, rest) = elements
        .split_first()
        .ok_or(Error::InvalidScene("no optical elements"))?;
    Ok(rest.iter().fold(*first, |acc, m| *m * acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, FRAC_PI_6, FRAC_PI_8, PI};

    type M = MuellerMatrix<f64>;
    type S = StokesVector<f64>;

    fn assert_stokes(a: S, b: [f64; 4], eps: f64) {
        for (x, y) in a.as_array().iter().zip(b) {
            assert_abs_diff_eq!(*x, y, epsilon = eps);
        }
    }

    // Naive triple-loop product used as an independent check of `Mul`.
    fn naive_product(a: &M, b: &M) -> M {
        let mut out = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                out[i][j] = (0..4).map(|k| a[(i, k)] * b[(k, j)]).sum();
            }
        }
        M::from_rows(out)
    }

    #[test]
    fn qwp_examples() {
        let q = M::qwp(0.0);
        let expect = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, -1.0, 0.0],
        ];
        assert!(q.max_abs_diff(&M::from_rows(expect)) < 1e-15);

        let out = M::qwp(FRAC_PI_4).apply(&S::new(1.0, 1.0, 0.0, 0.0));
        assert_stokes(out, [1.0, 0.0, 0.0, 1.0], 1e-15);

        let out = M::qwp(FRAC_PI_8).apply(&S::new(1.0, 0.0, 1.0, 0.0));
        assert_stokes(out, [1.0, 0.5, 0.5, -std::f64::consts::FRAC_1_SQRT_2], 1e-12);
    }

    #[test]
    fn hwp_examples() {
        let out = M::hwp(FRAC_PI_4).apply(&S::new(1.0, 1.0, 0.0, 0.0));
        assert_stokes(out, [1.0, -1.0, 0.0, 0.0], 1e-15);

        let diag = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, -1.0, 0.0],
            [0.0, 0.0, 0.0, -1.0],
        ];
        assert!(M::hwp(0.0).max_abs_diff(&M::from_rows(diag)) < 1e-15);

        let out = M::hwp(FRAC_PI_8).apply(&S::new(1.0, 1.0, 0.0, 0.0));
        assert_stokes(out, [1.0, 0.0, 1.0, 0.0], 1e-15);
    }

    #[test]
    fn pbs_examples() {
        let p = M::pbs();
        assert_stokes(p.apply(&S::new(1.0, 1.0, 0.0, 0.0)), [1.0, 1.0, 0.0, 0.0], 0.0);
        assert_stokes(p.apply(&S::new(1.0, -1.0, 0.0, 0.0)), [0.0; 4], 0.0);
        assert_stokes(p.apply(&S::new(1.0, 0.0, 0.0, 1.0)), [0.5, 0.5, 0.0, 0.0], 0.0);
        assert_stokes(p.apply(&S::new(2.0, 0.0, 0.0, 0.0)), [1.0, 1.0, 0.0, 0.0], 0.0);
    }

    #[test]
    fn lcvr_examples() {
        assert!(M::lcvr(FRAC_PI_4, PI).max_abs_diff(&M::hwp(FRAC_PI_4)) < 1e-12);
        for theta in [0.0, 0.3, 1.0, -2.0] {
            assert!(M::lcvr(theta, 0.0).max_abs_diff(&M::identity()) < 1e-15);
        }
        let out = M::lcvr(0.0, FRAC_PI_2).apply(&S::new(1.0, 0.0, 1.0, 0.0));
        assert_stokes(out, [1.0, 0.0, 0.0, -1.0], 1e-12);
    }

    #[test]
    fn triple_examples() {
        assert_eq!(M::lcvr_triple(0.0, 0.0, 0.0), M::identity());
        let out = M::lcvr_triple(0.0, FRAC_PI_2, 0.0).apply(&S::new(1.0, 1.0, 0.0, 0.0));
        assert_stokes(out, [1.0, 0.0, 0.0, 1.0], 1e-15);
    }

    #[test]
    fn compose_examples() {
        assert_eq!(compose(&[M::identity()]).unwrap(), M::identity());
        assert_eq!(
            compose::<f64>(&[]),
            Err(Error::InvalidScene("no optical elements"))
        );

        let h = CardinalState::H.stokes::<f64>();
        let twice = compose(&[M::hwp(FRAC_PI_8), M::hwp(FRAC_PI_8)]).unwrap();
        assert_stokes(twice.apply(&h), [1.0, 1.0, 0.0, 0.0], 1e-15);

        // Rotating-QWP analyzer: PBS after QWP.
        let sys = compose(&[M::qwp(FRAC_PI_6), M::pbs()]).unwrap();
        let direct = naive_product(&M::pbs(), &M::qwp(FRAC_PI_6));
        assert!(sys.max_abs_diff(&direct) < 1e-12);
    }

    #[test]
    fn inversion_examples() {
        assert_eq!(M::identity().invert_retarder().unwrap(), M::identity());
        for phi in [0.0, 0.2, 1.3] {
            let h = M::hwp(phi);
            assert!(h.invert_retarder().unwrap().max_abs_diff(&h) < 1e-15);
        }
        assert!(matches!(M::pbs().invert_retarder(), Err(Error::NotRetarder(_))));
    }

    #[test]
    fn fidelity_examples() {
        let n = |a, b, c| NormalizedStokes::<f64>::new(a, b, c).unwrap();
        assert_eq!(fidelity(&n(1.0, 0.0, 0.0), &n(1.0, 0.0, 0.0)), 1.0);
        assert_eq!(fidelity(&n(1.0, 0.0, 0.0), &n(-1.0, 0.0, 0.0)), 0.0);
        assert_eq!(fidelity(&n(1.0, 0.0, 0.0), &n(0.0, 1.0, 0.0)), 0.5);
        assert!(matches!(
            NormalizedStokes::<f64>::new(1.0, 0.1, 0.0),
            Err(Error::NotNormalized { .. })
        ));
    }

    #[test]
    fn dop_and_normalize_examples() {
        assert_eq!(S::new(1.0, 1.0, 0.0, 0.0).degree_of_polarization().unwrap(), 1.0);
        assert_eq!(S::new(1.0, 0.0, 0.0, 0.0).degree_of_polarization().unwrap(), 0.0);
        assert_abs_diff_eq!(
            S::new(1.0, 0.3, 0.4, 0.5).degree_of_polarization().unwrap(),
            0.5f64.sqrt(),
            epsilon = 1e-15
        );
        assert!(matches!(
            S::new(0.0, 0.0, 0.0, 0.0).degree_of_polarization(),
            Err(Error::NonPositiveIntensity(_))
        ));

        let u = S::new(2.0, 2.0, 0.0, 0.0).normalize().unwrap();
        assert_eq!(u.as_array(), [1.0, 0.0, 0.0]);
        let u = S::new(1.0, 0.6, 0.0, 0.8).normalize().unwrap();
        assert_abs_diff_eq!(u.u1(), 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(u.u3(), 0.8, epsilon = 1e-15);
        let u = S::new(5.0, 3.0, 0.0, 4.0).normalize().unwrap();
        assert_abs_diff_eq!(u.u1(), 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(u.u3(), 0.8, epsilon = 1e-15);
        assert_eq!(S::new(1.0, 0.0, 0.0, 0.0).normalize(), Err(Error::Degenerate));
    }

    #[test]
    fn checked_constructor() {
        assert!(S::checked(1.0, 0.6, 0.0, 0.8).is_ok());
        assert!(S::checked(-1.0, 0.0, 0.0, 0.0).is_err());
        assert!(S::checked(1.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn works_in_f32() {
        let m = MuellerMatrix::<f32>::lcvr_triple(0.3, 1.1, -0.7);
        let inv = m.invert_retarder().unwrap();
        assert!((inv * m).max_abs_diff(&MuellerMatrix::identity()) < 1e-5);
    }

    fn unit_vec() -> impl Strategy<Value = NormalizedStokes<f64>> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("non-zero", |(x, y, z)| x * x + y * y + z * z > 1e-3)
            .prop_map(|(x, y, z)| NormalizedStokes::from_components(x, y, z).unwrap())
    }

    fn angle() -> impl Strategy<Value = f64> {
        -10.0..10.0f64
    }

    proptest! {
        #[test]
        fn triple_matches_composition(d1 in angle(), d2 in angle(), d3 in angle()) {
            let composed = compose(&[
                M::lcvr(0.0, d1),
                M::lcvr(FRAC_PI_4, d2),
                M::lcvr(0.0, d3),
            ]).unwrap();
            prop_assert!(M::lcvr_triple(d1, d2, d3).max_abs_diff(&composed) < 1e-12);
        }

        #[test]
        fn retarders_are_rotations(theta in angle(), delta in angle(), phi in angle()) {
            for m in [M::lcvr(theta, delta), M::qwp(phi), M::hwp(phi), M::lcvr_triple(theta, delta, phi)] {
                prop_assert!(m.is_retarder(1e-12));
                let r = m.rotation_block();
                let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
                    - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
                    + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
                prop_assert!((det - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn retarders_preserve_dop(
            theta in angle(), delta in angle(),
            s1 in -0.5..0.5f64, s2 in -0.5..0.5f64, s3 in -0.5..0.5f64,
        ) {
            let s = S::new(1.0, s1, s2, s3);
            let out = M::lcvr(theta, delta).apply(&s);
            prop_assert!(
                (out.degree_of_polarization().unwrap() - s.degree_of_polarization().unwrap()).abs() < 1e-9
            );
        }

        #[test]
        fn inverse_is_left_inverse(d1 in angle(), d2 in angle(), d3 in angle()) {
            let m = M::lcvr_triple(d1, d2, d3);
            let prod = m.invert_retarder().unwrap() * m;
            prop_assert!(prod.max_abs_diff(&M::identity()) < 1e-12);
        }

        #[test]
        fn apply_matches_naive_sum(
            rows in proptest::array::uniform4(proptest::array::uniform4(-2.0..2.0f64)),
            v in proptest::array::uniform4(-2.0..2.0f64),
        ) {
            let m = M::from_rows(rows);
            let out = m.apply(&S::from_array(v)).as_array();
            for i in 0..4 {
                let mut acc = 0.0;
                for j in 0..4 {
                    acc += rows[i][j] * v[j];
                }
                prop_assert!((out[i] - acc).abs() <= 1e-15);
            }
        }

        #[test]
        fn fidelity_symmetric_and_bounded(a in unit_vec(), b in unit_vec()) {
            let f = fidelity(&a, &b);
            prop_assert_eq!(f, fidelity(&b, &a));
            prop_assert!((0.0..=1.0).contains(&f));
        }

        #[test]
        fn normalize_is_scale_invariant(
            k in 1e-3..1e3f64, s1 in -1.0..1.0f64, s2 in -1.0..1.0f64, s3 in -1.0..1.0f64,
        ) {
            prop_assume!(s1 * s1 + s2 * s2 + s3 * s3 > 1e-6);
            let s = S::new(2.0, s1, s2, s3);
            let a = s.normalize().unwrap();
            let b = s.scaled(k).normalize().unwrap();
            prop_assert!(a.distance(&b) < 1e-12);
        }

        #[test]
        fn pbs_output_is_horizontal(v in proptest::array::uniform4(-3.0..3.0f64)) {
            let out = M::pbs().apply(&S::from_array(v));
            prop_assert_eq!(out.s1, out.s0);
            prop_assert_eq!(out.s2, 0.0);
            prop_assert_eq!(out.s3, 0.0);
        }
    }
}

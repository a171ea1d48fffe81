use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid scene: {0}")]
    InvalidScene(&'static str),

    #[error("matrix is not a retarder: {0}")]
    NotRetarder(String),

    #[error("stokes vector is not normalized (|u| = {norm})")]
    NotNormalized { norm: f64 },

    #[error("degenerate state: polarized component is zero")]
    Degenerate,

    #[error("invalid stokes vector: {0}")]
    InvalidStokes(String),

    #[error("non-positive intensity s0 = {0}")]
    NonPositiveIntensity(f64),

    #[error("scan does not cover a full revolution: span {span} rad")]
    InsufficientSpan { span: f64 },

    #[error("invalid scan: {0}")]
    InvalidScan(String),

    #[error("calibration error: v_max ({v_max}) must exceed v_back ({v_back})")]
    Calibration { v_max: f64, v_back: f64 },

    #[error("error propagation undefined at the curve endpoint (v_meas = {v_meas})")]
    Endpoint { v_meas: f64 },

    #[error("unwrap ambiguity at index {index}: {reason}")]
    UnwrapAmbiguity { index: usize, reason: String },

    #[error("invalid sweep: {0}")]
    InvalidSweep(String),

    #[error("invalid curve: {0}")]
    InvalidCurve(String),

    #[error("voltage {voltage} V outside curve range [{min}, {max}] V")]
    OutOfRange { voltage: f64, min: f64, max: f64 },

    #[error("solver did not converge after {attempts} starts (best residual {best_residual:e})")]
    SolverFailure { attempts: usize, best_residual: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("value {value} outside [{min}, {max}]")]
    OutOfBounds { value: f64, min: f64, max: f64 },
}

use num_complex::Complex64;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: left is {left:?}, right is {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("matrix is numerically singular at s = {s} (condition number {cond:.3e})")]
    SingularAtS { s: Complex64, cond: f64 },

    #[error("eigenvector matrix is near-defective (condition number {cond:.3e}); perturb s")]
    DefectiveMatrix { cond: f64 },

    #[error("at f = {f_hz} Hz: {source}")]
    AtFrequency { f_hz: f64, source: Box<Error> },

    #[error("frequency grid invalid: {0}")]
    InvalidGrid(String),

    #[error("invalid converter spec: {0}")]
    InvalidSpec(String),

    #[error("Newton iteration failed to converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("mode refinement diverged; last iterate s = {last}")]
    NewtonDiverged { last: Complex64 },

    #[error("no eigen-locus within the capture radius of -1; stable with margin {margin:.4}")]
    NoCapture { margin: f64 },

    #[error("eigenvalue track lost for component {component}")]
    EigenTrackLost { component: String },

    #[error("numerical blowup at t = {t:.6} s (state {index} = {value:.3e})")]
    NumericalBlowup { t: f64, index: usize, value: f64 },

    #[error("ill-conditioned scan at f = {f_hz} Hz (condition number {cond:.3e})")]
    IllConditionedScan { f_hz: f64, cond: f64 },

    #[error("injection amplitude is zero")]
    AmplitudeZero,

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("state vector is not an equilibrium (scaled residual {residual:.3e})")]
    NoEquilibrium { residual: f64 },

    #[error("invalid simulation setup: {0}")]
    InvalidSimulation(String),

    #[error("config error{}{}: {message}", if path.is_empty() { String::new() } else { format!(" at {path}") }, line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Config {
        path: String,
        line: Option<usize>,
        message: String,
    },
}

impl Error {
    pub fn at_frequency(self, f_hz: f64) -> Self {
        Error::AtFrequency {
            f_hz,
            source: Box::new(self),
        }
    }
}

//! Error type shared across the crate.

use std::fmt;

/// Everything that can go wrong while building, certifying, or training a
/// controller.
#[derive(Debug)]
pub enum Error {
    /// Matrix or vector dimensions do not line up for the requested
    /// operation.
    DimensionMismatch(String),
    /// A value failed validation (sector bounds out of order, non-symmetric
    /// matrix where symmetry is required, bad configuration field, ...).
    Invalid(String),
    /// A fixed-point / Newton solve for an implicit layer did not reach the
    /// requested tolerance.
    EquilibriumDiverged {
        residual: f64,
        tolerance: f64,
        iterations: usize,
    },
    /// A matrix that must be invertible for the requested transformation is
    /// singular (or numerically too close to it).
    SingularMatrix(String),
    /// The conic solver terminated but reported the problem infeasible.
    Infeasible(String),
    /// The conic solver failed to converge or returned an unusable status.
    SolverFailure(String),
    /// A certificate check failed: the matrix inequality is not satisfied
    /// with the required margin.
    CertificateViolation { margin: f64, required: f64 },
    /// A simulated trajectory left the decay envelope promised by its
    /// certificate.
    EnvelopeViolation {
        step: usize,
        norm: f64,
        bound: f64,
    },
    /// File I/O failure.
    Io(std::io::Error),
    /// A structured file (plant, controller, certificate, config, dataset)
    /// could not be parsed.
    Parse(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch(msg) => write!(f, "dimension mismatch: {msg}"),
            Error::Invalid(msg) => write!(f, "invalid input: {msg}"),
            Error::EquilibriumDiverged {
                residual,
                tolerance,
                iterations,
            } => write!(
                f,
                "equilibrium solve stalled at residual {residual:.3e} \
                 (tolerance {tolerance:.1e}) after {iterations} iterations"
            ),
            Error::SingularMatrix(msg) => write!(f, "singular matrix: {msg}"),
            Error::Infeasible(msg) => write!(f, "infeasible: {msg}"),
            Error::SolverFailure(msg) => write!(f, "conic solver failure: {msg}"),
            Error::CertificateViolation { margin, required } => write!(
                f,
                "certificate violation: margin {margin:.3e} below required {required:.3e}"
            ),
            Error::EnvelopeViolation { step, norm, bound } => write!(
                f,
                "decay envelope violated at step {step}: |state| = {norm:.6e} > bound {bound:.6e}"
            ),
            Error::Io(err) => write!(f, "io error: {err}"),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        match err.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Parse(format!("csv: {other:?}")),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

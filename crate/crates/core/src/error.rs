use thiserror::Error;

use crate::conditioning::ConditionedBatch;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("point is not on the exit patch")]
    NotOnGamma,

    #[error("flow did not reach the boundary before t_max = {t_max}")]
    NoExit { t_max: f64 },

    #[error("state left the bounding box at t = {t}")]
    NonFinite { t: f64 },

    #[error("acceptance too low: {accepted} accepted out of {attempted} trials")]
    AcceptanceTooLow {
        accepted: u64,
        attempted: u64,
        batch: Box<ConditionedBatch>,
    },

    #[error("h underflow at x = {x:?}")]
    HUnderflow { x: Vec<f64> },

    #[error("drift is not transversal to the exit patch (<b, nu> = {normal_component})")]
    NonTransversal { normal_component: f64 },

    #[error("degenerate characteristic Jacobian")]
    DegenerateJacobian,

    #[error("point {x:?} is outside the region of strong regularity")]
    OutsideRegion { x: Vec<f64> },

    #[error("linearized flow is singular (|det| = {det})")]
    SingularPhi { det: f64 },

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("h underflow in elliptic solve (min interior value {min:e})")]
    Underflow { min: f64 },

    #[error("comparison region contains invalid nodes")]
    RegionInvalid,

    #[error("exit point {point:?} does not lie on the exit hyperplane")]
    MalformedExitPoint { point: Vec<f64> },

    #[error("predicted covariance is degenerate (smallest eigenvalue {min_eigenvalue:e})")]
    DegeneratePrediction { min_eigenvalue: f64 },

    #[error("need at least {required} samples, got {got}")]
    InsufficientSamples { required: usize, got: usize },
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

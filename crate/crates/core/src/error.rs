use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("point is not on the boundary (|signed distance| = {distance:e})")]
    PointNotOnBoundary { distance: f64 },

    #[error("bead {bead} lies outside the domain (signed distance {distance:e})")]
    BeadOutsideDomain { bead: usize, distance: f64 },

    #[error("point lies outside the flow domain")]
    OutsideDomain,

    #[error("step rejected for chain {chain}: bead {bead} needed more than {max} wall reflections")]
    StepRejected { chain: usize, bead: usize, max: usize },

    #[error("time step {dt:e} exceeds the stability bound {bound:e}")]
    StabilityViolation { dt: f64, bound: f64 },

    #[error("velocity grid too coarse: n_v = {n_v} (need at least 8)")]
    GridTooCoarse { n_v: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("linear solve failed: residual {residual:e} after {iterations} iterations")]
    LinearSolveFailure { residual: f64, iterations: usize },

    #[error("malformed field container: {0}")]
    Container(String),
}

pub type Result<T> = std::result::Result<T, Error>;

//! Error type shared by all modules.

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("mass matrix not SPD at q = {q:?}")]
    MassNotSpd { q: Vec<f64> },

    #[error("compatibility condition violated at (q, v) = ({q:?}, {v:?})")]
    CompatibilityViolated { q: Vec<f64>, v: Vec<f64> },

    #[error("{what}: expected length {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },

    #[error("singular matrix in linear solve (pivot {pivot:.3e} below {threshold:.3e})")]
    SingularMatrix { pivot: f64, threshold: f64 },

    #[error("newton did not converge: residual {residual:.3e} after {iterations} iterations")]
    NewtonStalled { residual: f64, iterations: usize },

    #[error("initialization failed: residual {residual:.3e} after {iterations} iterations")]
    InitializationFailed { residual: f64, iterations: usize },

    #[error("step failed at k = {index}: {source}")]
    StepFailed { index: usize, source: Box<Error> },

    #[error("shooting failed: endpoint residual {residual:.3e} after {iterations} iterations")]
    ShootingFailed { residual: f64, iterations: usize },

    #[error("shooting failed for perturbed endpoint (coordinate {coordinate}): {source}")]
    PerturbedShotFailed { coordinate: usize, source: Box<Error> },

    #[error(
        "regularity failure: the control Hessian d2H/du2 is singular, so the control \
         cannot be eliminated; degenerate problems are not supported"
    )]
    RegularityFailure,

    #[error(
        "boundary-value shooting did not converge: best residual {residual:.3e} \
         after {iterations} iterations"
    )]
    OcpShootingFailed { residual: f64, iterations: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

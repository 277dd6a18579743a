//! Crate-wide error type.

/// Errors surfaced by solvers and I/O. Numerical routines are total on finite
/// inputs wherever possible; errors mark genuine contract violations
/// (domain/configuration mistakes) or detected numerical breakdown.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A point left the open box the reference density lives on.
    #[error("point {value} outside the open interval (-{half_width}, {half_width})")]
    OutsideDomain { value: f64, half_width: f64 },

    /// Invalid run configuration; the message names the violated rule.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// The augmented ODE state became non-finite (overflow) for a particle.
    #[error("non-finite state while integrating particle {particle}")]
    NonFiniteState { particle: usize },

    /// A transport-map Jacobian was not positive where one was required.
    #[error("transport map is not orientation-preserving at particle {particle} (J = {jacobian})")]
    NotDiffeomorphism { particle: usize, jacobian: f64 },

    /// The per-axis map failed a monotonicity check during grid inversion.
    #[error("transport map is not monotone along axis {axis}")]
    NonMonotoneMap { axis: usize },

    /// Conjugate gradients produced non-finite arithmetic.
    #[error("linear solver breakdown at iteration {iteration} (residual {residual})")]
    SolverBreakdown { iteration: usize, residual: f64 },

    /// The inner elliptic solve stalled above a usable residual.
    #[error("elliptic inner solve did not converge: relative residual {residual} after {iterations} iterations")]
    InnerSolveStalled { residual: f64, iterations: usize },

    /// The Sobolev flow could not decrease the energy even with tiny steps.
    #[error("gradient flow stalled: step size collapsed to {tau} at step {step} (energy {energy})")]
    FlowStalled { step: usize, tau: f64, energy: f64 },

    /// Mismatched grids or vector lengths.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A grid function violated a precondition (normalization, boundary).
    #[error("invalid grid function: {0}")]
    InvalidGrid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed file {path}: {message}")]
    Format { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

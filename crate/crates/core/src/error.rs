use thiserror::Error;

/// Error type shared by every solver and verification routine in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Grid construction rejected its inputs (zero steps, non-finite
    /// horizon, or a path-indexed grid beyond the hard step cap).
    #[error("invalid grid: {0}")]
    Grid(String),

    /// A scenario file failed validation. `path` is the JSON key path of
    /// the offending entry, e.g. `coefficients.sigma["3,1"]`.
    #[error("invalid scenario at `{path}`: {message}")]
    Scenario { path: String, message: String },

    /// The implicit backward step would divide by `1 - a*dt <= 0`.
    #[error("implicit step unstable at step {step}: a*dt = {a_dt} is not below 1")]
    StepSize { step: usize, a_dt: f64 },

    /// The damped per-node fixed point for the equilibrium slope failed to
    /// reach its tolerance.
    #[error(
        "equilibrium slope iteration stalled at step {step}, node {node}: \
         residual {residual:.3e} after {iterations} iterations"
    )]
    NonConvergence {
        step: usize,
        node: usize,
        residual: f64,
        iterations: usize,
    },

    /// The leading factor `P1` lost strict positivity, so the second-order
    /// coefficient of the cost expansion is no longer bounded away from
    /// zero and the equilibrium construction is invalid.
    #[error("positivity lost: P1 = {value:.6e} at step {step}, node {node}")]
    Positivity {
        step: usize,
        node: usize,
        value: f64,
    },

    /// A wealth-dependent operation was asked to run on a grid that cannot
    /// distinguish paths (recombining mode, or a full tree that would
    /// exceed the step cap).
    #[error("operation requires a path-indexed grid with at most {max} steps ({detail})")]
    PathMode { max: usize, detail: String },

    /// The state-dependent preference branch (`gamma2 > 0`) is only defined
    /// when the interest rate is deterministic.
    #[error("state-dependent preference branch requires a deterministic interest rate")]
    RandomRate,

    /// Two objects built on different grids were combined.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    // Display already includes the cause for these two, so they are plain
    // fields (a `#[from]`-derived `source()` would print it twice in
    // error chains).
    #[error("i/o error: {0}")]
    Io(std::io::Error),

    #[error("invalid scenario JSON: {0}")]
    Json(serde_json::Error),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

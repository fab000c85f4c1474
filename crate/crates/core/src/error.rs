use thiserror::Error;

/// Errors raised by the solvers, filters and experiment drivers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Malformed input: wrong shape, non-finite entries, bad probability vector.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Row and column marginals carry different total mass.
    #[error("infeasible marginals: row mass {row} vs column mass {col}")]
    Infeasible { row: f64, col: f64 },

    /// The transportation simplex hit its pivot limit.
    #[error("transport solver did not converge within {0} pivots")]
    PivotLimit(usize),

    /// A column with zero prior weight still receives mass in the coupling.
    #[error("column {column} has zero marginal but carries mass {mass}")]
    DegenerateColumn { column: usize, mass: f64 },

    /// Every likelihood vanished, so the importance weights are undefined.
    #[error("all importance weights vanished")]
    DegenerateWeights,

    /// Observation noise covariance is not symmetric positive definite.
    #[error("invalid observation model: {0}")]
    InvalidModel(String),

    /// Iterative numerical routine failed (implicit solve, quadrature, factorization).
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

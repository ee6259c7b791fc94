use thiserror::Error;

/// Errors surfaced by model construction, solvers, and the driver.
#[derive(Debug, Error)]
pub enum E4Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("infeasible safety parameters: l = {l:.6} <= 0; smallest workable budget is d > {min_d:.6}")]
    ConfigInfeasible { l: f64, min_d: f64 },

    #[error("solver diverged at iteration {iteration}: {what}")]
    SolverDiverged { iteration: usize, what: String },

    #[error("constrained problem infeasible: best achievable cost {best_cost:.6} exceeds budget {budget:.6}")]
    Infeasible { best_cost: f64, budget: f64 },

    #[error("linear program infeasible (phase-1 objective {residual:.3e})")]
    LpInfeasible { residual: f64 },

    #[error("linear program unbounded on variable {var}")]
    LpUnbounded { var: usize },

    #[error("problem too large for exhaustive oracle: {0}")]
    SizeLimit(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation failed:\n{}", .0.join("\n"))]
    Validation(Vec<String>),

    #[error("run aborted: {0}")]
    RunAborted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, E4Error>;

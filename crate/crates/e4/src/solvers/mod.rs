//! Offline robust-constrained optimisation on induced CMDPs: Lagrangian
//! policy gradient, robust value iteration with an outer dual search, and the
//! occupation-measure linear program.

mod occupation_lp;
mod policy_gradient;
mod robust_dp;
mod simplex;

pub use occupation_lp::{solve_occupation_lp, LpReport};
pub use policy_gradient::{pg_gradient_estimate, solve_policy_gradient, solve_policy_gradient_from};
pub use robust_dp::{
    robust_policy_cost, robust_policy_value, robust_value_iteration, solve_lagrangian_dp,
    solve_lagrangian_dp_warm,
};
pub use simplex::{solve_lp, LpSolution};

use crate::cmdp::TabularPolicy;

/// Learning-rate schedule `a / (1 + k / b)`.
#[derive(Clone, Copy, Debug)]
pub struct Schedule {
    pub a: f64,
    pub b: f64,
}

impl Schedule {
    pub fn value(&self, k: usize) -> f64 {
        self.a / (1.0 + k as f64 / self.b)
    }
}

/// Shared solver knobs. Schedules default to `0.1/(1+k/(I/10))` for the
/// policy and `0.01/(1+k/(I/10))` for the multiplier.
#[derive(Clone, Copy, Debug)]
pub struct SolverConfig {
    pub iterations: usize,
    pub horizon: usize,
    pub eta1: Schedule,
    pub eta2: Schedule,
    pub tolerance: f64,
    pub seed: u64,
}

impl SolverConfig {
    pub fn new(iterations: usize, horizon: usize) -> Self {
        let b = (iterations as f64 / 10.0).max(1.0);
        SolverConfig {
            iterations,
            horizon,
            eta1: Schedule { a: 0.1, b },
            eta2: Schedule { a: 0.01, b },
            tolerance: 1e-6,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }
}

/// A solved policy with its achieved value and constraint-cost under the
/// solver's start distribution (uniform over the induced subset).
#[derive(Clone, Debug)]
pub struct SolveOutcome {
    pub policy: TabularPolicy,
    pub value: f64,
    pub cost: f64,
    pub lambda: f64,
    pub iterations: usize,
}

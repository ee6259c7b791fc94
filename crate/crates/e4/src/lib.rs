//! Tabular safe reinforcement learning with explicit exploration, exploitation,
//! and escape policies on robust constrained MDPs.
//!
//! The crate provides:
//!
//! - [`cmdp`]: constrained MDPs, induced sub-CMDPs, policies, exact evaluation.
//! - [`knowledge`]: visitation counts, empirical models, the known/unknown split.
//! - [`uncertainty`]: ambiguity sets over kernels and worst-case expectation queries.
//! - [`solvers`]: Lagrangian policy gradient, robust value iteration with an
//!   outer dual search, and the occupation-measure linear program.
//! - [`driver`]: the main explore/exploit/escape loop with safety budgets.
//! - [`env`]: the gridworld testbed, random CMDP generation, and sampling envs.
//! - [`oracle`]: brute-force references used by the test and acceptance suites.
//! - [`io`]: text formats for models and counts, CSV run logs, JSON summaries.

pub mod cli;
pub mod cmdp;
pub mod config;
pub mod driver;
pub mod env;
pub mod error;
pub mod io;
pub mod knowledge;
pub mod oracle;
pub mod par;
pub mod solvers;
pub mod uncertainty;

pub use cmdp::{
    alpha_approximation_gap, diameter, epsilon_horizon, evaluate_policy, g_max_t, induce,
    path_return_and_cost, Cmdp, Evaluation, Horizon, InducedCmdp, InducedVariant, NoiseKind,
    NoiseSpec, Step, TabularPolicy, Trajectory,
};
pub use error::{E4Error, Result};

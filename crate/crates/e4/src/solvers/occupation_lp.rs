//! The discounted occupation-measure linear program on a nominal induced CMDP.
//!
//! Variables `f(s,a)` are discounted state-action visitation proportions.
//! Flow conservation ties them to the start distribution; the cost constraint
//! `f . c <= (1 - gamma) * budget` expresses the asymptotic budget. The
//! one-time terminal payout folds into the transition rewards as
//! `gamma * P(exit | s, a) * terminal_reward`, so the terminal state needs no
//! variables of its own.

use crate::cmdp::{InducedCmdp, TabularPolicy};
use crate::error::{E4Error, Result};
use crate::solvers::simplex::solve_lp;

/// An occupation-measure solution: the extracted policy, its value and cost
/// under the start distribution, the raw measure, and basis diagnostics.
#[derive(Clone, Debug)]
pub struct LpReport {
    pub policy: TabularPolicy,
    pub value: f64,
    pub cost: f64,
    pub occupation: Vec<f64>,
    pub degenerate_basics: usize,
}

/// Solves `max f.r  s.t. flow(f) = (1-gamma) mu0, f >= 0,
/// f.c <= (1-gamma) budget` and extracts `pi(a|s) = f(s,a) / sum_a f(s,a)`.
///
/// `start` defaults to uniform over the induced subset. States with zero
/// occupation get uniform rows.
pub fn solve_occupation_lp(
    m: &InducedCmdp<'_>,
    budget: f64,
    start: Option<&[f64]>,
) -> Result<LpReport> {
    let states = m.states();
    let base = m.base();
    let gamma = m.gamma();
    let a_count = base.num_actions;
    let k = states.len();
    let nvars = k * a_count;

    let mut index_of = vec![usize::MAX; base.num_states];
    for (i, &s) in states.iter().enumerate() {
        index_of[s] = i;
    }

    let mu0: Vec<f64> = match start {
        Some(mu) => {
            if mu.len() != base.num_states {
                return Err(E4Error::ShapeMismatch {
                    expected: format!("{} start weights", base.num_states),
                    got: format!("{}", mu.len()),
                });
            }
            states.iter().map(|&s| mu[s]).collect()
        }
        None => vec![1.0 / k as f64; k],
    };

    // Flow conservation per interior state:
    // sum_a f(s',a) - gamma * sum_{s,a} P(s'|s,a) f(s,a) = (1-gamma) mu0(s').
    let mut a_eq = vec![vec![0.0; nvars]; k];
    let mut b_eq = vec![0.0; k];
    for j in 0..k {
        for a in 0..a_count {
            a_eq[j][j * a_count + a] += 1.0;
        }
        b_eq[j] = (1.0 - gamma) * mu0[j];
    }
    for (i, &s) in states.iter().enumerate() {
        for a in 0..a_count {
            let col = i * a_count + a;
            for (sp, &p) in m.kernel_row(s, a).iter().enumerate() {
                if p > 0.0 && index_of[sp] != usize::MAX {
                    a_eq[index_of[sp]][col] -= gamma * p;
                }
            }
        }
    }

    // Objective and cost rows with the terminal payout folded in.
    let mut reward_row = vec![0.0; nvars];
    let mut cost_row = vec![0.0; nvars];
    for (i, &s) in states.iter().enumerate() {
        for a in 0..a_count {
            let col = i * a_count + a;
            let exit = m.exit_probability(s, a);
            reward_row[col] = m.reward(s, a) + gamma * exit * m.terminal_reward;
            cost_row[col] = m.cost(s, a) + gamma * exit * m.terminal_cost;
        }
    }
    let a_ub = vec![cost_row.clone()];
    let b_ub = vec![(1.0 - gamma) * budget];

    let sol = match solve_lp(&reward_row, &a_eq, &b_eq, &a_ub, &b_ub) {
        Ok(sol) => sol,
        Err(E4Error::LpInfeasible { .. }) => {
            // Report how close the budget could have come: minimise cost
            // under the same flow constraints.
            let neg_cost: Vec<f64> = cost_row.iter().map(|c| -c).collect();
            let best = solve_lp(&neg_cost, &a_eq, &b_eq, &[], &[])?;
            return Err(E4Error::Infeasible {
                best_cost: -best.objective / (1.0 - gamma),
                budget,
            });
        }
        Err(e) => return Err(e),
    };

    let mut probs = vec![1.0 / a_count as f64; base.num_states * a_count];
    for (i, &s) in states.iter().enumerate() {
        let mass: f64 = (0..a_count).map(|a| sol.x[i * a_count + a]).sum();
        if mass > 1e-12 {
            for a in 0..a_count {
                probs[s * a_count + a] = sol.x[i * a_count + a] / mass;
            }
        }
    }
    // Normalise away simplex round-off so the policy validates exactly.
    for s in 0..base.num_states {
        let row = &mut probs[s * a_count..(s + 1) * a_count];
        let sum: f64 = row.iter().sum();
        for p in row.iter_mut() {
            *p /= sum;
        }
    }
    let policy = TabularPolicy::from_probs(base.num_states, a_count, probs)?;
    let cost: f64 = cost_row.iter().zip(&sol.x).map(|(c, f)| c * f).sum();
    Ok(LpReport {
        policy,
        value: sol.objective / (1.0 - gamma),
        cost: cost / (1.0 - gamma),
        occupation: sol.x,
        degenerate_basics: sol.degenerate_basics,
    })
}

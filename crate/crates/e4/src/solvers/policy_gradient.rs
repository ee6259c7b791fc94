//! Saddle-point policy gradient on the Lagrangian `V - lambda (C - d)`.
//!
//! Each iteration rolls one trajectory from a uniformly drawn start state.
//! Transitions sample the adversarial kernel: per step, the inner-problem
//! argmax against the current policy's robust cost-to-go (a singleton set
//! short-circuits to the nominal row). The backward pass updates the logits
//! per time step with returns-to-go; the multiplier moves once per trajectory
//! on the full discounted cost and projects back to `lambda >= 0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::cmdp::{evaluate_policy, Horizon, InducedCmdp, TabularPolicy};
use crate::error::{E4Error, Result};
use crate::solvers::robust_dp::robust_policy_cost;
use crate::solvers::{SolveOutcome, SolverConfig};
use crate::uncertainty::UncertaintySet;

struct RolledStep {
    state: usize,
    action: usize,
    reward: f64,
    cost: f64,
}

fn softmax_row(theta: &[f64], out: &mut [f64]) {
    let m = theta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &t) in out.iter_mut().zip(theta) {
        let e = (t - m).exp();
        *o = e;
        z += e;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// One Lagrangian gradient estimate at fixed parameters: the mean over
/// `n_traj` sampled trajectories of `sum_t grad log pi(a_t|s_t) (V_t - lambda C_t)`
/// with returns-to-go. Kept separate from the optimiser so finite-difference
/// checks can target the estimator itself.
pub fn pg_gradient_estimate(
    m: &InducedCmdp<'_>,
    set: &UncertaintySet,
    theta: &[f64],
    lambda: f64,
    horizon: usize,
    n_traj: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let base = m.base();
    let a_count = base.num_actions;
    if theta.len() != base.num_states * a_count {
        return Err(E4Error::ShapeMismatch {
            expected: format!("{} logits", base.num_states * a_count),
            got: format!("{}", theta.len()),
        });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let policy = TabularPolicy::from_logits(base.num_states, a_count, theta.to_vec())?;
    let cost_togo = cost_vector(m, set, &policy, horizon);
    let mut grad = vec![0.0; theta.len()];
    let mut row = vec![0.0; a_count];
    for _ in 0..n_traj {
        let steps = roll(m, set, &policy, cost_togo.as_deref(), horizon, &mut rng);
        let (mut v, mut c) = tail_values(m, &steps, horizon);
        for step in steps.iter().rev() {
            v = step.reward + m.gamma() * v;
            c = step.cost + m.gamma() * c;
            let coef = v - lambda * c;
            softmax_row(&theta[step.state * a_count..(step.state + 1) * a_count], &mut row);
            for b in 0..a_count {
                let indicator = if b == step.action { 1.0 } else { 0.0 };
                grad[step.state * a_count + b] += coef * (indicator - row[b]);
            }
        }
    }
    for g in grad.iter_mut() {
        *g /= n_traj as f64;
    }
    Ok(grad)
}

/// The robust cost-to-go of the current policy, or `None` when the set is a
/// singleton (the argmax kernel is the nominal row regardless).
fn cost_vector(
    m: &InducedCmdp<'_>,
    set: &UncertaintySet,
    policy: &TabularPolicy,
    horizon: usize,
) -> Option<Vec<f64>> {
    match set {
        UncertaintySet::Singleton { .. } => None,
        _ => Some(robust_policy_cost(m, set, policy, horizon)),
    }
}

/// Tail initialisation for the backward pass: a trajectory that exited the
/// subset collects the terminal payout at the step after its last action,
/// provided that index still fits the horizon window.
fn tail_values(m: &InducedCmdp<'_>, steps: &[RolledStep], horizon: usize) -> (f64, f64) {
    if steps.len() < horizon {
        (m.terminal_reward, m.terminal_cost)
    } else {
        (0.0, 0.0)
    }
}

fn roll(
    m: &InducedCmdp<'_>,
    set: &UncertaintySet,
    policy: &TabularPolicy,
    cost_togo: Option<&[f64]>,
    horizon: usize,
    rng: &mut ChaCha12Rng,
) -> Vec<RolledStep> {
    let states = m.states();
    let mut s = states[rng.gen_range(0..states.len())];
    let mut steps = Vec::new();
    for _ in 0..horizon {
        let a = policy.sample_action(s, rng);
        steps.push(RolledStep {
            state: s,
            action: a,
            reward: m.reward(s, a),
            cost: m.cost(s, a),
        });
        let next = match cost_togo {
            None => crate::cmdp::sample_index(m.kernel_row(s, a), rng),
            Some(ctg) => {
                let (_, row) = set.worst_case_expectation(s, a, ctg);
                crate::cmdp::sample_index(&row, rng)
            }
        };
        if !m.is_interior(next) {
            break;
        }
        s = next;
    }
    steps
}

/// Saddle-point policy gradient from zero logits.
pub fn solve_policy_gradient(
    m: &InducedCmdp<'_>,
    set: &UncertaintySet,
    budget: f64,
    cfg: &SolverConfig,
) -> Result<SolveOutcome> {
    solve_policy_gradient_from(m, set, budget, cfg, None)
}

/// Saddle-point policy gradient, optionally warm-starting the logits.
///
/// Returns the softmax policy of the tail-averaged logits (the saddle point
/// of a constrained problem is typically a mixture, which single iterates
/// orbit rather than reach), with its exact value and cost on the model.
pub fn solve_policy_gradient_from(
    m: &InducedCmdp<'_>,
    set: &UncertaintySet,
    budget: f64,
    cfg: &SolverConfig,
    theta0: Option<&[f64]>,
) -> Result<SolveOutcome> {
    let base = m.base();
    let a_count = base.num_actions;
    let dim = base.num_states * a_count;
    let mut theta = match theta0 {
        Some(t) if t.len() == dim => t.to_vec(),
        Some(t) => {
            return Err(E4Error::ShapeMismatch {
                expected: format!("{dim} logits"),
                got: format!("{}", t.len()),
            })
        }
        None => vec![0.0; dim],
    };
    let mut lambda = 0.0_f64;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let horizon = cfg.horizon;
    let tail_from = cfg.iterations / 2;
    // The saddle point of a constrained problem is usually a mixture that
    // single iterates orbit; averaging the tail in probability space lands on
    // it. Sampling every few iterations keeps the full-softmax cost down.
    let tail_stride = (cfg.iterations / 4096).max(1);
    let mut prob_avg = vec![0.0; dim];
    let mut tail_count = 0usize;
    let mut row = vec![0.0; a_count];

    for k in 0..cfg.iterations {
        let policy = TabularPolicy::from_logits(base.num_states, a_count, theta.clone())?;
        let cost_togo = cost_vector(m, set, &policy, horizon);
        let steps = roll(m, set, &policy, cost_togo.as_deref(), horizon, &mut rng);
        let eta1 = cfg.eta1.value(k);
        let eta2 = cfg.eta2.value(k);
        let (mut v, mut c) = tail_values(m, &steps, horizon);
        for step in steps.iter().rev() {
            v = step.reward + m.gamma() * v;
            c = step.cost + m.gamma() * c;
            let coef = v - lambda * c;
            let offset = step.state * a_count;
            softmax_row(&theta[offset..offset + a_count], &mut row);
            for b in 0..a_count {
                let indicator = if b == step.action { 1.0 } else { 0.0 };
                theta[offset + b] += eta1 * coef * (indicator - row[b]);
            }
        }
        lambda = (lambda + eta2 * (c - budget)).max(0.0);
        if !theta.iter().all(|x| x.is_finite()) || !lambda.is_finite() {
            return Err(E4Error::SolverDiverged {
                iteration: k,
                what: "non-finite policy parameters".into(),
            });
        }
        if k >= tail_from && (k - tail_from) % tail_stride == 0 {
            for s in 0..base.num_states {
                softmax_row(&theta[s * a_count..(s + 1) * a_count], &mut row);
                for b in 0..a_count {
                    prob_avg[s * a_count + b] += row[b];
                }
            }
            tail_count += 1;
        }
    }

    for avg in prob_avg.iter_mut() {
        *avg /= tail_count.max(1) as f64;
    }
    // Log-probabilities are the logits whose softmax is the averaged policy.
    let logits: Vec<f64> = prob_avg.iter().map(|&p| p.max(1e-300).ln()).collect();
    let policy = TabularPolicy::from_logits(base.num_states, a_count, logits)?;
    let ev = evaluate_policy(m, &policy, Horizon::Steps(horizon))?;
    let states = m.states();
    let n = states.len() as f64;
    let value = states.iter().map(|&s| ev.values[s]).sum::<f64>() / n;
    let cost = states.iter().map(|&s| ev.costs[s]).sum::<f64>() / n;
    Ok(SolveOutcome {
        policy,
        value,
        cost,
        lambda,
        iterations: cfg.iterations,
    })
}

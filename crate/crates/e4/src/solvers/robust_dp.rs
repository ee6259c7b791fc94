//! Robust value iteration on the Lagrangian MDP and the outer dual search.
//!
//! The Lagrangian reward is `r - lambda c`. Backups are pessimistic in value:
//! the adversary maximises cost-to-go, which for value vectors means querying
//! the inner problem with the negated vector. Singleton sets get a sparse
//! fast path; structured sets go through [`UncertaintySet::worst_value`].

use crate::cmdp::{InducedCmdp, TabularPolicy};
use crate::error::{E4Error, Result};
use crate::solvers::{SolveOutcome, SolverConfig};
use crate::uncertainty::{sort_desc, UncertaintySet};

const GOLDEN: f64 = 0.618_033_988_749_894_9;

/// Sparse row view of a singleton set's kernel, per interior (state, action).
enum Inner<'a> {
    Sparse(Vec<Vec<(u32, f64)>>),
    Set(&'a UncertaintySet),
}

impl<'a> Inner<'a> {
    fn build(m: &InducedCmdp<'_>, set: &'a UncertaintySet) -> Inner<'a> {
        match set {
            UncertaintySet::Singleton {
                num_states,
                num_actions,
                kernel,
            } => {
                let mut rows = Vec::with_capacity(m.states().len() * m.num_actions());
                for &s in m.states() {
                    for a in 0..m.num_actions() {
                        let base = (s * num_actions + a) * num_states;
                        let row: Vec<(u32, f64)> = kernel[base..base + num_states]
                            .iter()
                            .enumerate()
                            .filter(|(_, &p)| p > 0.0)
                            .map(|(sp, &p)| (sp as u32, p))
                            .collect();
                        rows.push(row);
                    }
                }
                Inner::Sparse(rows)
            }
            other => Inner::Set(other),
        }
    }

    /// `max_{P in set} P . v`; `idx` is the interior-state ordinal for the
    /// sparse path, `order` a shared descending argsort of `v`.
    #[inline]
    fn max_expectation(
        &self,
        idx: usize,
        num_actions: usize,
        s: usize,
        a: usize,
        v: &[f64],
        order: Option<&[usize]>,
    ) -> f64 {
        match self {
            Inner::Sparse(rows) => rows[idx * num_actions + a]
                .iter()
                .map(|&(sp, p)| p * v[sp as usize])
                .sum(),
            Inner::Set(set) => set.worst_value(s, a, v, order),
        }
    }
}

struct Sweeps<'a> {
    cap: usize,
    residual_stop: Option<f64>,
    warm: Option<&'a [f64]>,
}

/// Core robust backup loop. Returns base-space values (exterior entries carry
/// the terminal Lagrangian continuation) and the greedy action per interior
/// state.
fn rvi_core(
    m: &InducedCmdp<'_>,
    set: &UncertaintySet,
    lambda: f64,
    sweeps: Sweeps<'_>,
) -> (Vec<f64>, Vec<usize>) {
    let base = m.base();
    let n = base.num_states;
    let a_count = base.num_actions;
    let gamma = m.gamma();
    // The escape problem is pure cost minimisation: its Lagrangian reward is
    // -c regardless of the multiplier.
    let escape = m.variant == crate::cmdp::InducedVariant::Escape;
    let terminal_lag = if escape {
        -m.terminal_cost
    } else {
        m.terminal_reward - lambda * m.terminal_cost
    };
    let inner = Inner::build(m, set);
    let structured = matches!(inner, Inner::Set(_));

    let mut v = vec![0.0; n];
    match sweeps.warm {
        Some(w) => v.copy_from_slice(w),
        None => {
            if sweeps.residual_stop.is_some() {
                for s in 0..n {
                    if !m.is_interior(s) {
                        v[s] = terminal_lag;
                    }
                }
            }
        }
    }
    let mut v_next = v.clone();
    let mut greedy = vec![0usize; n];
    let mut neg = vec![0.0; n];

    for _ in 0..sweeps.cap {
        let order = if structured {
            for i in 0..n {
                neg[i] = -v[i];
            }
            Some(sort_desc(&neg))
        } else {
            None
        };
        let mut delta: f64 = 0.0;
        for (idx, &s) in m.states().iter().enumerate() {
            let mut best = f64::NEG_INFINITY;
            let mut best_a = 0;
            for a in 0..a_count {
                // Pessimistic continuation: -max_P P.(-v) for structured
                // sets; a singleton just dots v.
                let cont = if structured {
                    -inner.max_expectation(idx, a_count, s, a, &neg, order.as_deref())
                } else {
                    inner.max_expectation(idx, a_count, s, a, &v, None)
                };
                let q = m.reward(s, a) - lambda * m.cost(s, a) + gamma * cont;
                if q > best {
                    best = q;
                    best_a = a;
                }
            }
            delta = delta.max((best - v[s]).abs());
            v_next[s] = best;
            greedy[s] = best_a;
        }
        for s in 0..n {
            if !m.is_interior(s) {
                v_next[s] = terminal_lag;
            }
        }
        std::mem::swap(&mut v, &mut v_next);
        if let Some(tol) = sweeps.residual_stop {
            if delta < tol {
                break;
            }
        }
    }
    for s in 0..n {
        if !m.is_interior(s) {
            v[s] = terminal_lag;
        }
    }
    (v, greedy)
}

fn greedy_policy(m: &InducedCmdp<'_>, greedy: &[usize]) -> TabularPolicy {
    let base = m.base();
    let a_count = base.num_actions;
    let mut probs = vec![1.0 / a_count as f64; base.num_states * a_count];
    for &s in m.states() {
        for a in 0..a_count {
            probs[s * a_count + a] = 0.0;
        }
        probs[s * a_count + greedy[s]] = 1.0;
    }
    TabularPolicy::from_probs(base.num_states, a_count, probs).expect("rows are one-hot")
}

/// T sweeps of robust value iteration on the Lagrangian reward `r - lambda c`.
/// Ties break toward the lowest action index. Returns base-space values and
/// the greedy policy.
pub fn robust_value_iteration(
    m: &InducedCmdp<'_>,
    set: &UncertaintySet,
    lambda: f64,
    horizon: usize,
) -> Result<(Vec<f64>, TabularPolicy)> {
    if lambda < 0.0 {
        return Err(E4Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    let (v, greedy) = rvi_core(
        m,
        set,
        lambda,
        Sweeps { cap: horizon, residual_stop: None, warm: None },
    );
    Ok((v.clone(), greedy_policy(m, &greedy)))
}

/// Worst-case discounted cost of a fixed policy: the adversary maximises the
/// cost-to-go at every backup.
pub fn robust_policy_cost(
    m: &InducedCmdp<'_>,
    set: &UncertaintySet,
    policy: &TabularPolicy,
    horizon: usize,
) -> Vec<f64> {
    policy_backup(m, set, policy, horizon, true)
}

/// Pessimistic discounted value of a fixed policy (adversarial kernel per
/// state-action).
pub fn robust_policy_value(
    m: &InducedCmdp<'_>,
    set: &UncertaintySet,
    policy: &TabularPolicy,
    horizon: usize,
) -> Vec<f64> {
    policy_backup(m, set, policy, horizon, false)
}

fn policy_backup(
    m: &InducedCmdp<'_>,
    set: &UncertaintySet,
    policy: &TabularPolicy,
    horizon: usize,
    cost_side: bool,
) -> Vec<f64> {
    let base = m.base();
    let n = base.num_states;
    let a_count = base.num_actions;
    let gamma = m.gamma();
    let terminal = if cost_side { m.terminal_cost } else { m.terminal_reward };
    let inner = Inner::build(m, set);
    let structured = matches!(inner, Inner::Set(_));

    let mut x = vec![0.0; n];
    let mut x_next = vec![0.0; n];
    let mut neg = vec![0.0; n];
    for _ in 0..horizon {
        let order = if structured {
            if cost_side {
                Some(sort_desc(&x))
            } else {
                for i in 0..n {
                    neg[i] = -x[i];
                }
                Some(sort_desc(&neg))
            }
        } else {
            None
        };
        for (idx, &s) in m.states().iter().enumerate() {
            let mut xs = 0.0;
            for a in 0..a_count {
                let p = policy.prob(s, a);
                if p == 0.0 {
                    continue;
                }
                let cont = if !structured {
                    inner.max_expectation(idx, a_count, s, a, &x, None)
                } else if cost_side {
                    inner.max_expectation(idx, a_count, s, a, &x, order.as_deref())
                } else {
                    -inner.max_expectation(idx, a_count, s, a, &neg, order.as_deref())
                };
                let immediate = if cost_side { m.cost(s, a) } else { m.reward(s, a) };
                xs += p * (immediate + gamma * cont);
            }
            x_next[s] = xs;
        }
        for s in 0..n {
            if !m.is_interior(s) {
                x_next[s] = terminal;
            }
        }
        std::mem::swap(&mut x, &mut x_next);
    }
    for s in 0..n {
        if !m.is_interior(s) {
            x[s] = terminal;
        }
    }
    x
}

fn mean_over_states(m: &InducedCmdp<'_>, x: &[f64]) -> f64 {
    let states = m.states();
    states.iter().map(|&s| x[s]).sum::<f64>() / states.len() as f64
}

/// Constrained robust solve: outer search over the multiplier with robust
/// value iteration inside. Returns the policy at the smallest multiplier
/// whose robust constraint-cost meets the budget; at the critical multiplier
/// the two bracketing greedy policies are mixed so the budget binds exactly.
pub fn solve_lagrangian_dp(
    m: &InducedCmdp<'_>,
    set: &UncertaintySet,
    budget: f64,
    cfg: &SolverConfig,
) -> Result<SolveOutcome> {
    solve_lagrangian_dp_warm(m, set, budget, cfg, None).map(|(outcome, _)| outcome)
}

/// As [`solve_lagrangian_dp`], optionally warm-starting value iteration from
/// a previous solution. Warm starts iterate to the asymptotic fixed point
/// (residual `cfg.tolerance * (1 - gamma)`), which never underestimates the
/// cost of the horizon-limited problem. Also returns the final value vector
/// for the next warm start.
pub fn solve_lagrangian_dp_warm(
    m: &InducedCmdp<'_>,
    set: &UncertaintySet,
    budget: f64,
    cfg: &SolverConfig,
    warm: Option<&[f64]>,
) -> Result<(SolveOutcome, Vec<f64>)> {
    let horizon = cfg.horizon;
    let residual = cfg.tolerance * (1.0 - m.gamma()).max(1e-3);
    fn make_sweeps<'w>(horizon: usize, residual: f64, w: Option<&'w [f64]>) -> Sweeps<'w> {
        Sweeps {
            cap: if w.is_some() { horizon.saturating_mul(10).max(100) } else { horizon },
            residual_stop: w.map(|_| residual),
            warm: w,
        }
    }

    let solve_at = |lambda: f64, w: Option<&'_ [f64]>| -> (Vec<f64>, TabularPolicy) {
        let (v, greedy) = rvi_core(m, set, lambda, make_sweeps(horizon, residual, w));
        let policy = greedy_policy(m, &greedy);
        (v, policy)
    };
    let eval = |policy: &TabularPolicy| -> (f64, f64) {
        let v = robust_policy_value(m, set, policy, horizon);
        let c = robust_policy_cost(m, set, policy, horizon);
        (mean_over_states(m, &v), mean_over_states(m, &c))
    };

    // Unconstrained robust optimum first: if it already satisfies the budget
    // the multiplier never moves.
    let (v0, pi0) = solve_at(0.0, warm);
    let (val0, cost0) = eval(&pi0);
    if cost0 <= budget + cfg.tolerance {
        let outcome = SolveOutcome {
            policy: pi0,
            value: val0,
            cost: cost0,
            lambda: 0.0,
            iterations: 1,
        };
        return Ok((outcome, v0));
    }

    let r_max = m.base().r_max;
    let lambda_max = (r_max / cfg.tolerance).max(1.0);
    let mut evals = 1usize;

    // Bracket a feasible multiplier by doubling.
    let mut lambda_hi = 1.0;
    let mut cost_hi;
    loop {
        let (_, pi) = solve_at(lambda_hi, warm);
        cost_hi = eval(&pi).1;
        evals += 1;
        if cost_hi <= budget + cfg.tolerance {
            break;
        }
        lambda_hi *= 2.0;
        if lambda_hi > lambda_max {
            let (_, pi_last) = solve_at(lambda_max, warm);
            let (_, best_cost) = eval(&pi_last);
            if best_cost <= budget + cfg.tolerance {
                lambda_hi = lambda_max;
                break;
            }
            return Err(E4Error::Infeasible { best_cost, budget });
        }
    }

    // Golden-section on the dual g(lambda) = V - lambda (C - budget), which is
    // convex in lambda; its minimiser is the critical multiplier.
    let dual = |lambda: f64| -> f64 {
        let (_, pi) = solve_at(lambda, warm);
        let (v, c) = eval(&pi);
        v - lambda * (c - budget)
    };
    let (mut a, mut b) = (0.0, lambda_hi);
    let mut x1 = b - GOLDEN * (b - a);
    let mut x2 = a + GOLDEN * (b - a);
    let mut f1 = dual(x1);
    let mut f2 = dual(x2);
    for _ in 0..60 {
        if b - a < cfg.tolerance * lambda_hi.max(1.0) {
            break;
        }
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - GOLDEN * (b - a);
            f1 = dual(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + GOLDEN * (b - a);
            f2 = dual(x2);
        }
        evals += 1;
    }

    // Tighten to an adjacent bracket with the cost-sign property, falling
    // back to the known endpoints when the golden bracket sits inside one
    // linear piece of the dual.
    let cost_of = |lambda: f64| -> (TabularPolicy, f64) {
        let (_, pi) = solve_at(lambda, warm);
        let c = eval(&pi).1;
        (pi, c)
    };
    let (mut lo, mut lo_cost) = (a, cost_of(a).1);
    let (mut hi, mut hi_cost) = (b, cost_of(b).1);
    if lo_cost <= budget {
        // Whole bracket feasible; slide the infeasible side to zero.
        lo = 0.0;
        lo_cost = cost0;
        hi = a;
        hi_cost = cost_of(a).1;
        if hi_cost > budget {
            hi = b;
            hi_cost = cost_hi;
        }
    } else if hi_cost > budget {
        hi = lambda_hi;
        hi_cost = cost_hi;
    }
    let _ = (lo_cost, hi_cost);
    for _ in 0..80 {
        if hi - lo < 1e-12 * hi.max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let (_, c_mid) = cost_of(mid);
        if c_mid <= budget + cfg.tolerance {
            hi = mid;
        } else {
            lo = mid;
        }
        evals += 1;
    }

    let (pi_hi, c_hi) = cost_of(hi);
    let (v_hi_val, _) = eval(&pi_hi);
    if (c_hi - budget).abs() <= cfg.tolerance || lo == 0.0 {
        let outcome = SolveOutcome {
            policy: pi_hi,
            value: v_hi_val,
            cost: c_hi,
            lambda: hi,
            iterations: evals,
        };
        let v_store = robust_policy_value(m, set, &outcome.policy, horizon);
        return Ok((outcome, v_store));
    }

    // At the critical multiplier the budget typically sits between the two
    // bracketing greedy policies. Mix them so it binds exactly; both are
    // optimal for the critical Lagrangian, so the mixture recovers the value
    // a deterministic policy cannot express.
    let (pi_lo, _) = cost_of(lo);
    let cost_of_mix = |w: f64| -> (TabularPolicy, f64) {
        let mix = pi_lo.mix(&pi_hi, w).expect("same shape");
        let c = mean_over_states(m, &robust_policy_cost(m, set, &mix, horizon));
        (mix, c)
    };
    let (mut w_lo, mut w_hi) = (0.0, 1.0); // w is the weight on the infeasible policy
    for _ in 0..60 {
        let w_mid = 0.5 * (w_lo + w_hi);
        let (_, c_mid) = cost_of_mix(w_mid);
        if c_mid <= budget {
            w_lo = w_mid;
        } else {
            w_hi = w_mid;
        }
    }
    let (mix, c_mix) = cost_of_mix(w_lo);
    let v_mix = mean_over_states(m, &robust_policy_value(m, set, &mix, horizon));
    let v_store = robust_policy_value(m, set, &mix, horizon);
    let outcome = SolveOutcome {
        policy: mix,
        value: v_mix,
        cost: c_mix,
        lambda: 0.5 * (lo + hi),
        iterations: evals,
    };
    Ok((outcome, v_store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::{induce, Cmdp, InducedVariant};
    use crate::env::random_cmdp;
    use crate::solvers::solve_occupation_lp;

    fn bandit(gamma: f64, rewards: [f64; 2], costs: [f64; 2]) -> Cmdp {
        Cmdp::new(1, 2, gamma, 3.0, 1.0, 1.0, vec![1.0, 1.0], rewards.to_vec(), costs.to_vec())
            .unwrap()
    }

    #[test]
    fn singleton_lambda_zero_is_plain_value_iteration() {
        let m = random_cmdp(5, 3, 0.9, 3.0, 1.0, 17).unwrap();
        let view = m.full_view();
        let set = UncertaintySet::singleton_from(&m);
        let (v, policy) = robust_value_iteration(&view, &set, 0.0, 2000).unwrap();
        // The greedy policy's exact value matches the iterated values.
        let ev = crate::cmdp::evaluate_policy(&view, &policy, crate::cmdp::Horizon::Infinite)
            .unwrap();
        for s in 0..5 {
            assert!((v[s] - ev.values[s]).abs() < 1e-6, "state {s}: {} vs {}", v[s], ev.values[s]);
        }
        // And it is optimal: no deterministic policy does better.
        for actions in crate::oracle::DeterministicPolicies::new(5, 3) {
            let pi = TabularPolicy::deterministic(5, 3, &actions).unwrap();
            let other = crate::cmdp::evaluate_policy(&view, &pi, crate::cmdp::Horizon::Infinite)
                .unwrap();
            for s in 0..5 {
                assert!(other.values[s] <= v[s] + 1e-6);
            }
        }
    }

    #[test]
    fn full_simplex_l1_routes_mass_adversarially() {
        // Two states, one action each; state 1 absorbing with no reward.
        // Nominal goes to state 1; with psi = 2 the adversary can also only
        // choose within the simplex, so value drops to the worst state.
        let kernel = vec![0.5, 0.5, 0.0, 1.0];
        let m = Cmdp::new(2, 1, 0.5, 3.0, 1.0, 1.0, kernel, vec![1.0, 0.0], vec![0.0, 0.0])
            .unwrap();
        let view = m.full_view();
        let psi_full = UncertaintySet::l1_from(&m, vec![2.0, 2.0]).unwrap();
        let (v_rob, _) = robust_value_iteration(&view, &psi_full, 0.0, 500).unwrap();
        // Worst case: every step from state 0 gets redirected to state 1.
        // V(0) = 1 + gamma * V(1), V(1) = 0.
        assert!((v_rob[0] - 1.0).abs() < 1e-9, "robust value {}", v_rob[0]);
        assert!(v_rob[1].abs() < 1e-12);
        // Hand computation for the nominal: V(0) = 1 / (1 - gamma/2).
        let nominal = UncertaintySet::singleton_from(&m);
        let (v_nom, _) = robust_value_iteration(&view, &nominal, 0.0, 500).unwrap();
        assert!((v_nom[0] - 1.0 / (1.0 - 0.25)).abs() < 1e-9);
        assert!(v_rob[0] <= v_nom[0]);
    }

    #[test]
    fn large_lambda_minimises_worst_case_cost() {
        // Escape-style: chain 0 -> 1 -> out, or a risky shortcut. With a huge
        // multiplier the greedy policy is the worst-case-cost minimiser,
        // i.e. the shortest-expected-cost path.
        let m = random_cmdp(4, 2, 0.9, 3.0, 1.0, 23).unwrap();
        let sub = induce(&m, &[0, 1, 2], InducedVariant::Escape, 1.5).unwrap();
        let set = UncertaintySet::singleton_from(&m);
        let (_, pi) = robust_value_iteration(&sub, &set, 1e9, 300).unwrap();
        let cost_pi = robust_policy_cost(&sub, &set, &pi, 300);
        // Exhaustive check: no deterministic policy achieves lower cost.
        for actions in crate::oracle::DeterministicPolicies::new(4, 2) {
            let other = TabularPolicy::deterministic(4, 2, &actions).unwrap();
            let c = robust_policy_cost(&sub, &set, &other, 300);
            for &s in sub.states() {
                assert!(cost_pi[s] <= c[s] + 1e-6, "state {s}");
            }
        }
    }

    #[test]
    fn inactive_budget_returns_unconstrained_optimum() {
        let m = random_cmdp(4, 2, 0.9, 3.0, 1.0, 29).unwrap();
        let view = m.full_view();
        let set = UncertaintySet::singleton_from(&m);
        let cfg = SolverConfig::new(1, 3000);
        let out = solve_lagrangian_dp(&view, &set, 1e9, &cfg).unwrap();
        assert_eq!(out.lambda, 0.0);
        let (v, _) = robust_value_iteration(&view, &set, 0.0, 3000).unwrap();
        let mean = (0..4).map(|s| v[s]).sum::<f64>() / 4.0;
        assert!((out.value - mean).abs() < 1e-6);
    }

    #[test]
    fn constrained_bandit_matches_hand_lp() {
        let m = bandit(0.5, [1.0, 0.0], [1.0, 0.0]);
        let view = m.full_view();
        let set = UncertaintySet::singleton_from(&m);
        let cfg = SolverConfig::new(1, 4000);
        let out = solve_lagrangian_dp(&view, &set, 1.0, &cfg).unwrap();
        assert!((out.value - 1.0).abs() < 1e-2, "value {}", out.value);
        assert!(out.cost <= 1.0 + 1e-6);
        assert!((out.policy.prob(0, 0) - 0.5).abs() < 0.01);
    }

    #[test]
    fn impossible_budget_is_infeasible() {
        let m = bandit(0.5, [1.0, 0.0], [1.0, 0.5]);
        let view = m.full_view();
        let set = UncertaintySet::singleton_from(&m);
        let cfg = SolverConfig::new(1, 2000);
        let err = solve_lagrangian_dp(&view, &set, 0.3, &cfg).unwrap_err();
        assert!(matches!(err, E4Error::Infeasible { .. }));
    }

    #[test]
    fn dp_agrees_with_lp_on_random_instances() {
        for seed in [1u64, 2, 3] {
            let m = random_cmdp(4, 2, 0.9, 3.0, 1.0, 100 + seed).unwrap();
            let view = m.full_view();
            let set = UncertaintySet::singleton_from(&m);
            // A budget between the cheapest and the unconstrained cost keeps
            // the constraint active.
            let unconstrained = solve_occupation_lp(&view, 1e9, None).unwrap();
            let budget = 0.7 * unconstrained.cost.max(0.5);
            let lp = match solve_occupation_lp(&view, budget, None) {
                Ok(r) => r,
                Err(_) => continue,
            };
            let cfg = SolverConfig::new(1, 4000);
            let dp = match solve_lagrangian_dp(&view, &set, budget, &cfg) {
                Ok(o) => o,
                Err(_) => continue,
            };
            assert!(
                (dp.value - lp.value).abs() < 1e-3,
                "seed {seed}: dp {} vs lp {}",
                dp.value,
                lp.value
            );
        }
    }

    #[test]
    fn warm_start_matches_cold_solve() {
        let m = random_cmdp(5, 2, 0.95, 3.0, 1.0, 51).unwrap();
        let view = m.full_view();
        let set = UncertaintySet::singleton_from(&m);
        let cfg = SolverConfig::new(1, 3000);
        let (cold, values) = solve_lagrangian_dp_warm(&view, &set, 1e9, &cfg, None).unwrap();
        let (warm, _) = solve_lagrangian_dp_warm(&view, &set, 1e9, &cfg, Some(&values)).unwrap();
        assert!((cold.value - warm.value).abs() < 1e-5);
        for s in 0..5 {
            for a in 0..2 {
                assert!((cold.policy.prob(s, a) - warm.policy.prob(s, a)).abs() < 1e-9);
            }
        }
    }
}

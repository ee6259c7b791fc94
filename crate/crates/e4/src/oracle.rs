//! Brute-force references for the test and acceptance suites.
//!
//! Everything here trades time for independence: policy enumeration, raw path
//! enumeration without memoisation, and grid search over the probability
//! simplex. None of it shares code with the solvers it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::cmdp::{evaluate_policy, sample_index, Cmdp, Horizon, InducedCmdp, TabularPolicy};
use crate::error::{E4Error, Result};

const ENUMERATION_CAP: usize = 2_000_000;

/// Iterator over all deterministic policies (one action per state).
pub struct DeterministicPolicies {
    num_states: usize,
    num_actions: usize,
    current: Option<Vec<usize>>,
}

impl DeterministicPolicies {
    pub fn new(num_states: usize, num_actions: usize) -> Self {
        DeterministicPolicies {
            num_states,
            num_actions,
            current: Some(vec![0; num_states]),
        }
    }

    pub fn count(num_states: usize, num_actions: usize) -> f64 {
        (num_actions as f64).powi(num_states as i32)
    }
}

impl Iterator for DeterministicPolicies {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let out = self.current.clone()?;
        // Odometer increment.
        let cur = self.current.as_mut().unwrap();
        let mut i = 0;
        loop {
            if i == self.num_states {
                self.current = None;
                break;
            }
            cur[i] += 1;
            if cur[i] < self.num_actions {
                break;
            }
            cur[i] = 0;
            i += 1;
        }
        Some(out)
    }
}

/// All compositions of `k` into `parts` non-negative integers, as rows summing
/// to one on the grid `1/k`. Used for discretised stochastic policies and the
/// simplex grid search.
fn for_each_composition<F: FnMut(&[usize])>(k: usize, parts: usize, f: &mut F) {
    fn rec<F: FnMut(&[usize])>(remaining: usize, idx: usize, buf: &mut Vec<usize>, f: &mut F) {
        if idx == buf.len() - 1 {
            buf[idx] = remaining;
            f(buf);
            return;
        }
        for take in 0..=remaining {
            buf[idx] = take;
            rec(remaining - take, idx + 1, buf, f);
        }
    }
    let mut buf = vec![0usize; parts];
    rec(k, 0, &mut buf, f);
}

fn compositions_count(k: usize, parts: usize) -> f64 {
    // C(k + parts - 1, parts - 1)
    let mut out = 1.0;
    for i in 0..parts - 1 {
        out *= (k + parts - 1 - i) as f64 / (parts - 1 - i) as f64;
    }
    out
}

/// Exhaustively solves the constrained problem `max V s.t. C <= budget` under
/// the uniform start distribution over the model's interior states.
///
/// With `grid_step = None` the search covers all deterministic policies
/// (adequate when the constraint is not active at the optimum). A grid step
/// discretises stochastic policies instead, which is how randomised
/// constrained optima are found on tiny instances.
pub fn exact_constrained_optimum(
    m: &InducedCmdp<'_>,
    budget: f64,
    horizon: Horizon,
    grid_step: Option<f64>,
) -> Result<(f64, TabularPolicy)> {
    let states = m.states();
    let base = m.base();
    let (s_full, a_full) = (base.num_states, base.num_actions);
    let mut best: Option<(f64, TabularPolicy)> = None;
    let mut lowest_cost = f64::INFINITY;

    let consider = |policy: TabularPolicy,
                        best: &mut Option<(f64, TabularPolicy)>,
                        lowest_cost: &mut f64|
     -> Result<()> {
        let ev = evaluate_policy(m, &policy, horizon)?;
        let n = states.len() as f64;
        let v: f64 = states.iter().map(|&s| ev.values[s]).sum::<f64>() / n;
        let c: f64 = states.iter().map(|&s| ev.costs[s]).sum::<f64>() / n;
        *lowest_cost = lowest_cost.min(c);
        if c <= budget + 1e-9 && best.as_ref().map_or(true, |(bv, _)| v > *bv) {
            *best = Some((v, policy));
        }
        Ok(())
    };

    match grid_step {
        None => {
            if DeterministicPolicies::count(s_full, a_full) > ENUMERATION_CAP as f64 {
                return Err(E4Error::SizeLimit(format!(
                    "{a_full}^{s_full} deterministic policies exceed the enumeration cap"
                )));
            }
            for actions in DeterministicPolicies::new(s_full, a_full) {
                let policy = TabularPolicy::deterministic(s_full, a_full, &actions)?;
                consider(policy, &mut best, &mut lowest_cost)?;
            }
        }
        Some(h) => {
            if h <= 0.0 || h > 1.0 {
                return Err(E4Error::InvalidArgument(format!("grid step {h} out of range")));
            }
            let k = (1.0 / h).round() as usize;
            let rows_per_state = compositions_count(k, a_full);
            if rows_per_state.powi(states.len() as i32) > ENUMERATION_CAP as f64 {
                return Err(E4Error::SizeLimit(
                    "stochastic policy grid exceeds the enumeration cap".into(),
                ));
            }
            let mut rows: Vec<Vec<f64>> = Vec::new();
            for_each_composition(k, a_full, &mut |c| {
                rows.push(c.iter().map(|&x| x as f64 / k as f64).collect());
            });
            // Assign one grid row per interior state (uniform elsewhere).
            let mut assignment = vec![0usize; states.len()];
            loop {
                let mut probs = vec![1.0 / a_full as f64; s_full * a_full];
                for (i, &s) in states.iter().enumerate() {
                    probs[s * a_full..(s + 1) * a_full].copy_from_slice(&rows[assignment[i]]);
                }
                let policy = TabularPolicy::from_probs(s_full, a_full, probs)?;
                consider(policy, &mut best, &mut lowest_cost)?;
                let mut i = 0;
                loop {
                    if i == assignment.len() {
                        assignment.clear();
                        break;
                    }
                    assignment[i] += 1;
                    if assignment[i] < rows.len() {
                        break;
                    }
                    assignment[i] = 0;
                    i += 1;
                }
                if assignment.is_empty() {
                    break;
                }
            }
        }
    }

    match best {
        Some(found) => Ok(found),
        None => Err(E4Error::Infeasible { best_cost: lowest_cost, budget }),
    }
}

/// Exact (value, cost) of a policy by enumerating every T-step path from `s`,
/// probability-weighted, with no memoisation. The blow-up guard follows
/// `(S*A)^T <= 10^6`.
pub fn enumerate_paths_eval(
    m: &InducedCmdp<'_>,
    policy: &TabularPolicy,
    s: usize,
    horizon: usize,
) -> Result<(f64, f64)> {
    let base = m.base();
    let branch = (base.num_states * base.num_actions) as f64;
    if branch.powi(horizon as i32) > 1e6 {
        return Err(E4Error::SizeLimit(format!(
            "({} * {})^{horizon} paths exceed the path enumeration guard",
            base.num_states, base.num_actions
        )));
    }
    if !m.is_interior(s) {
        return Ok((0.0, 0.0));
    }

    fn walk(
        m: &InducedCmdp<'_>,
        policy: &TabularPolicy,
        s: usize,
        t: usize,
        horizon: usize,
        prob: f64,
        disc: f64,
        acc: &mut (f64, f64),
    ) {
        if t == horizon {
            return;
        }
        let base = m.base();
        for a in 0..base.num_actions {
            let pa = policy.prob(s, a);
            if pa == 0.0 {
                continue;
            }
            let w = prob * pa;
            acc.0 += w * disc * m.reward(s, a);
            acc.1 += w * disc * m.cost(s, a);
            for (sp, &q) in m.kernel_row(s, a).iter().enumerate() {
                if q == 0.0 {
                    continue;
                }
                let w2 = w * q;
                if m.is_interior(sp) {
                    walk(m, policy, sp, t + 1, horizon, w2, disc * m.gamma(), acc);
                } else if t + 1 <= horizon - 1 {
                    // Terminal payout lands at index t+1 and must fit the window.
                    acc.0 += w2 * disc * m.gamma() * m.terminal_reward;
                    acc.1 += w2 * disc * m.gamma() * m.terminal_cost;
                }
            }
        }
    }

    let mut acc = (0.0, 0.0);
    walk(m, policy, s, 0, horizon, 1.0, 1.0, &mut acc);
    Ok(acc)
}

/// Brute-force maximum of `P . v` over the simplex grid of step `h`
/// intersected with the L1 ball of radius `psi` around `nominal`.
pub fn grid_inner_problem(nominal: &[f64], psi: f64, v: &[f64], h: f64) -> Result<f64> {
    let parts = nominal.len();
    if parts != v.len() {
        return Err(E4Error::ShapeMismatch {
            expected: format!("{parts} values"),
            got: format!("{}", v.len()),
        });
    }
    let k = (1.0 / h).round() as usize;
    if compositions_count(k, parts) > 6.0e6 {
        return Err(E4Error::SizeLimit("simplex grid too fine".into()));
    }
    let mut best = f64::NEG_INFINITY;
    for_each_composition(k, parts, &mut |c| {
        let mut l1 = 0.0;
        let mut val = 0.0;
        for (i, &ci) in c.iter().enumerate() {
            let p = ci as f64 / k as f64;
            l1 += (p - nominal[i]).abs();
            val += p * v[i];
        }
        if l1 <= psi + 1e-12 && val > best {
            best = val;
        }
    });
    Ok(best)
}

/// Minimal number of support-graph steps between two states, ignoring
/// probabilities. On deterministic models this equals the expected hitting
/// time, which makes it an independent check for `diameter`.
pub fn bfs_min_steps(m: &Cmdp, from: usize, to: usize) -> Option<usize> {
    if from == to {
        return Some(0);
    }
    let mut dist = vec![usize::MAX; m.num_states];
    dist[from] = 0;
    let mut queue = std::collections::VecDeque::from([from]);
    while let Some(s) = queue.pop_front() {
        for a in 0..m.num_actions {
            for (sp, &q) in m.kernel_row(s, a).iter().enumerate() {
                if q > 0.0 && dist[sp] == usize::MAX {
                    dist[sp] = dist[s] + 1;
                    if sp == to {
                        return Some(dist[sp]);
                    }
                    queue.push_back(sp);
                }
            }
        }
    }
    None
}

/// Monte Carlo estimate of the probability that `policy` reaches the terminal
/// of `m` within `horizon` steps from `s`.
pub fn mc_reach_terminal_prob(
    m: &InducedCmdp<'_>,
    policy: &TabularPolicy,
    s: usize,
    horizon: usize,
    rollouts: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..rollouts {
        let mut cur = s;
        for _ in 0..horizon {
            let a = policy.sample_action(cur, &mut rng);
            let row = m.kernel_row(cur, a);
            let next = sample_index(row, &mut rng);
            if !m.is_interior(next) {
                hits += 1;
                break;
            }
            cur = next;
        }
    }
    hits as f64 / rollouts as f64
}

/// Monte Carlo rollout estimate of (value, cost) from `s`, sampling the
/// model's kernel and using mean rewards/costs.
pub fn mc_policy_eval(
    m: &InducedCmdp<'_>,
    policy: &TabularPolicy,
    s: usize,
    horizon: usize,
    rollouts: usize,
    seed: u64,
) -> (f64, f64) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let gamma = m.gamma();
    let mut v_sum = 0.0;
    let mut c_sum = 0.0;
    for _ in 0..rollouts {
        let mut cur = s;
        let mut disc = 1.0;
        for t in 0..horizon {
            let a = policy.sample_action(cur, &mut rng);
            v_sum += disc * m.reward(cur, a);
            c_sum += disc * m.cost(cur, a);
            let next = sample_index(m.kernel_row(cur, a), &mut rng);
            disc *= gamma;
            if !m.is_interior(next) {
                if t + 1 <= horizon - 1 {
                    v_sum += disc * m.terminal_reward;
                    c_sum += disc * m.terminal_cost;
                }
                break;
            }
            cur = next;
        }
    }
    (v_sum / rollouts as f64, c_sum / rollouts as f64)
}

#[allow(dead_code)]
fn rng_smoke(r: &mut impl Rng) -> f64 {
    r.gen()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::InducedVariant;
    use crate::env::random_cmdp;

    #[test]
    fn deterministic_policy_iterator_is_exhaustive() {
        let all: Vec<_> = DeterministicPolicies::new(3, 2).collect();
        assert_eq!(all.len(), 8);
        let mut seen = std::collections::HashSet::new();
        for p in &all {
            assert!(seen.insert(p.clone()));
        }
    }

    #[test]
    fn unconstrained_bandit_prefers_rewarding_arm() {
        let m = Cmdp::new(
            1,
            2,
            0.5,
            3.0,
            1.0,
            1.0,
            vec![1.0, 1.0],
            vec![1.0, 0.0],
            vec![0.0, 0.0],
        )
        .unwrap();
        let view = m.full_view();
        let (v, policy) = exact_constrained_optimum(&view, 100.0, Horizon::Infinite, None).unwrap();
        assert!((v - 2.0).abs() < 1e-9);
        assert!((policy.prob(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constrained_bandit_requires_mixing() {
        // gamma = 0.5, r = (1, 0), c = (1, 0), budget 1: value 1 at the
        // half-half mixture (hand-solved occupation LP).
        let m = Cmdp::new(
            1,
            2,
            0.5,
            3.0,
            1.0,
            1.0,
            vec![1.0, 1.0],
            vec![1.0, 0.0],
            vec![1.0, 0.0],
        )
        .unwrap();
        let view = m.full_view();
        let (v, policy) =
            exact_constrained_optimum(&view, 1.0, Horizon::Infinite, Some(0.01)).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "grid optimum {v}");
        assert!((policy.prob(0, 0) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn infeasible_budget_reports_best_cost() {
        let m = Cmdp::new(1, 1, 0.5, 3.0, 1.0, 1.0, vec![1.0], vec![0.0], vec![1.0]).unwrap();
        let view = m.full_view();
        let err = exact_constrained_optimum(&view, 0.0, Horizon::Infinite, None).unwrap_err();
        match err {
            E4Error::Infeasible { best_cost, .. } => assert!((best_cost - 2.0).abs() < 1e-9),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn path_enumeration_matches_recursion() {
        let m = random_cmdp(3, 2, 0.9, 3.0, 1.0, 7).unwrap();
        let pi = TabularPolicy::uniform(3, 2);
        let view = m.full_view();
        for t in [0usize, 1, 3, 5] {
            let (v_enum, c_enum) = enumerate_paths_eval(&view, &pi, 0, t).unwrap();
            let ev = evaluate_policy(&view, &pi, Horizon::Steps(t)).unwrap();
            assert!(
                (v_enum - ev.values[0]).abs() < 1e-10,
                "T={t}: {v_enum} vs {}",
                ev.values[0]
            );
            assert!((c_enum - ev.costs[0]).abs() < 1e-10);
        }
    }

    #[test]
    fn path_enumeration_with_terminal_matches_recursion() {
        let m = random_cmdp(4, 2, 0.8, 3.0, 1.0, 11).unwrap();
        let pi = TabularPolicy::uniform(4, 2);
        let sub = crate::cmdp::induce(&m, &[0, 1], InducedVariant::Explore, 1.0).unwrap();
        for t in [1usize, 2, 4] {
            let (v_enum, c_enum) = enumerate_paths_eval(&sub, &pi, 0, t).unwrap();
            let ev = evaluate_policy(&sub, &pi, Horizon::Steps(t)).unwrap();
            assert!(
                (v_enum - ev.values[0]).abs() < 1e-10,
                "T={t}: {v_enum} vs {}",
                ev.values[0]
            );
            assert!((c_enum - ev.costs[0]).abs() < 1e-10);
        }
    }

    #[test]
    fn grid_inner_problem_examples() {
        let nominal = [0.5, 0.5, 0.0];
        let v = [0.0, 1.0, 2.0];
        // psi = 0 pins the nominal product.
        let at_zero = grid_inner_problem(&nominal, 0.0, &v, 0.005).unwrap();
        assert!((at_zero - 0.5).abs() < 1e-9);
        // Full simplex reaches max(v).
        let full = grid_inner_problem(&nominal, 2.0, &v, 0.005).unwrap();
        assert!((full - 2.0).abs() < 1e-9);
        // The 0.2-ball case lands at 0.7 up to grid resolution.
        let mid = grid_inner_problem(&nominal, 0.2, &v, 0.005).unwrap();
        assert!((mid - 0.7).abs() <= 0.005 * 2.0 + 1e-9, "grid value {mid}");
    }
}

//! The main loop: derive safety budgets, solve the three policies offline,
//! alternate exploration and exploitation on known states, and balanced
//! wandering with monitored escape in unknown states.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::cmdp::{
    epsilon_horizon, evaluate_policy, g_max_t, induce, Cmdp, Horizon, InducedCmdp, InducedVariant,
    Step, TabularPolicy,
};
use crate::env::SampleEnv;
use crate::error::{E4Error, Result};
use crate::knowledge::{KnowledgeBase, ModelShape};
use crate::solvers::{
    robust_policy_cost, robust_value_iteration, solve_lagrangian_dp_warm, solve_occupation_lp,
    solve_policy_gradient_from, SolverConfig,
};
use crate::uncertainty::{filter_models, hoeffding_budget, sort_desc, ModelSet, PsiConvention, UncertaintySet};

/// How the approximation slack epsilon is derived.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EpsilonMode {
    /// The main-loop assignment written with fixed exponents.
    Algorithm1,
    /// The escape-budget inequality with explicit phase lengths. `t_u`
    /// defaults to the escape horizon; `t_k` defaults to the epsilon-horizon
    /// iterated to a fixed point.
    Lemma9 {
        t_k: Option<usize>,
        t_u: Option<usize>,
    },
}

/// Derived safety budgets and horizons.
#[derive(Clone, Copy, Debug)]
pub struct SafetyParams {
    pub epsilon: f64,
    /// Budget enforced on the known-state CMDP: `d - 2 epsilon`.
    pub l: f64,
    /// Escape budget for unknown-state excursions: `d / 2`.
    pub d_prime: f64,
    /// Epsilon-horizon for exploration and exploitation trajectories.
    pub horizon: usize,
    /// Step cap for unknown-state excursions: the first T whose worst-case
    /// cost sum reaches the escape budget.
    pub escape_horizon: usize,
}

fn lemma9_epsilon(d: f64, gamma: f64, c_max: f64, t_k: usize, t_u: usize) -> f64 {
    let gk = gamma.powi(t_k as i32);
    let gu = gamma.powi(t_u as i32);
    let tail = c_max / (1.0 - gamma);
    let branch1 = gk * d / 2.0 + gu * tail;
    let branch2 = if gu > 0.0 {
        d - d / (2.0 * gu) - gk * tail
    } else {
        f64::NEG_INFINITY
    };
    branch1.max(branch2)
}

fn algorithm1_epsilon(d: f64, gamma: f64, c_max: f64) -> f64 {
    let tail = c_max / (1.0 - gamma);
    let branch1 = gamma * d / 2.0 + gamma.powi(3) * tail;
    let branch2 = if gamma > 0.0 {
        d - d / (2.0 * gamma) + gamma * tail
    } else {
        f64::NEG_INFINITY
    };
    branch1.max(branch2)
}

/// First step count whose worst-case cost sum reaches `d_prime`. When the
/// discounted sum converges below the budget the cap degenerates; it clamps
/// to one step, the most conservative excursion length.
pub fn escape_horizon(gamma: f64, c_max: f64, d_prime: f64) -> usize {
    let mut sum = 0.0;
    let mut disc = 1.0;
    for t in 1..=1_000_000usize {
        sum += disc * c_max;
        if sum >= d_prime {
            return t;
        }
        disc *= gamma;
        if disc * c_max < 1e-15 * d_prime.max(1.0) {
            break;
        }
    }
    1
}

/// Derives epsilon, the known-state budget `l`, the escape budget, and both
/// horizons. Fails when `l <= 0`, reporting the smallest workable `d`.
pub fn derive_safety_params(
    d: f64,
    gamma: f64,
    c_max: f64,
    r_max: f64,
    mode: EpsilonMode,
) -> Result<SafetyParams> {
    if d <= 2.0 * c_max {
        return Err(E4Error::InvalidArgument(format!(
            "budget d = {d} must exceed 2 c_max = {}",
            2.0 * c_max
        )));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(E4Error::InvalidArgument(format!("discount {gamma} out of [0,1)")));
    }
    let d_prime = d / 2.0;
    let t_prime = escape_horizon(gamma, c_max, d_prime);

    let (epsilon, t_k_used, t_u_used) = match mode {
        EpsilonMode::Algorithm1 => (algorithm1_epsilon(d, gamma, c_max), 1, t_prime),
        EpsilonMode::Lemma9 { t_k, t_u } => {
            let t_u = t_u.unwrap_or(t_prime);
            match t_k {
                Some(t_k) => (lemma9_epsilon(d, gamma, c_max, t_k, t_u), t_k, t_u),
                None => {
                    // Iterate t_k -> T(epsilon(t_k)) to a fixed point.
                    let mut t_k = t_prime.max(1);
                    let mut seen = std::collections::HashSet::new();
                    let mut eps = lemma9_epsilon(d, gamma, c_max, t_k, t_u);
                    for _ in 0..200 {
                        if eps <= 0.0 {
                            break;
                        }
                        let t_next = epsilon_horizon(gamma, r_max, c_max, eps)?;
                        if t_next == t_k || !seen.insert(t_next) {
                            t_k = t_next;
                            eps = lemma9_epsilon(d, gamma, c_max, t_k, t_u);
                            break;
                        }
                        t_k = t_next;
                        eps = lemma9_epsilon(d, gamma, c_max, t_k, t_u);
                    }
                    (eps, t_k, t_u)
                }
            }
        }
    };
    let _ = (t_k_used, t_u_used);

    let l = d - 2.0 * epsilon;
    if l <= 0.0 {
        // Smallest workable d at these settings: the binding branch is
        // linear in d.
        let tail = c_max / (1.0 - gamma);
        let min_d = match mode {
            EpsilonMode::Algorithm1 => {
                let b1 = 2.0 * gamma.powi(3) * tail / (1.0 - gamma);
                let b2 = if gamma > 0.0 {
                    2.0 * gamma * tail / (1.0 / gamma - 1.0)
                } else {
                    0.0
                };
                b1.max(b2)
            }
            EpsilonMode::Lemma9 { .. } => {
                let gk = gamma.powi(t_k_used as i32);
                let gu = gamma.powi(t_u_used as i32);
                if gk < 1.0 {
                    2.0 * gu * tail / (1.0 - gk)
                } else {
                    f64::INFINITY
                }
            }
        };
        return Err(E4Error::ConfigInfeasible { l, min_d });
    }
    let horizon = if epsilon > 0.0 {
        epsilon_horizon(gamma, r_max, c_max, epsilon)?
    } else {
        1
    };
    Ok(SafetyParams {
        epsilon,
        l,
        d_prime,
        horizon,
        escape_horizon: t_prime,
    })
}

/// Upper bound on the escape budget given phase lengths.
pub fn escape_budget_upper(
    d: f64,
    epsilon: f64,
    gamma: f64,
    t_k: usize,
    t_u: usize,
    c_max: f64,
) -> f64 {
    let gk = gamma.powi(t_k as i32);
    let gu = gamma.powi(t_u as i32);
    let tail = c_max / (1.0 - gamma);
    let branch1 = epsilon / gk - gu * tail;
    let branch2 = d - gu * (d - epsilon) - gu * gk * tail;
    branch1.max(branch2)
}

/// Balanced wandering: the least-taken action, lowest index on ties.
pub fn balanced_action(counts: &[u32]) -> usize {
    let mut best = 0;
    let mut best_n = u32::MAX;
    for (a, &n) in counts.iter().enumerate() {
        if n < best_n {
            best = a;
            best_n = n;
        }
    }
    best
}

/// The wandering-to-escape trigger: switch once the realised cost so far plus
/// the discounted worst one-step lookahead of the escape policy's robust
/// cost-to-go can no longer stay under the escape budget with one step of
/// margin.
#[allow(clippy::too_many_arguments)]
pub fn wandering_switch(
    cost_so_far: f64,
    t: usize,
    gamma: f64,
    set: &UncertaintySet,
    escape_cost_togo: &[f64],
    state: usize,
    num_actions: usize,
    d_prime: f64,
    c_max: f64,
) -> bool {
    let order = sort_desc(escape_cost_togo);
    let mut worst = f64::NEG_INFINITY;
    for a in 0..num_actions {
        worst = worst.max(set.worst_value(state, a, escape_cost_togo, Some(&order)));
    }
    cost_so_far + gamma.powi(t as i32) * worst >= d_prime - c_max
}

/// Exact probability that the exploration policy reaches the terminal within
/// `horizon` steps from `s`, by forward recursion on the model.
pub fn terminal_reach_probability(
    m: &InducedCmdp<'_>,
    policy: &TabularPolicy,
    s: usize,
    horizon: usize,
) -> f64 {
    let base = m.base();
    let n = base.num_states;
    let mut p = vec![0.0; n];
    let mut p_next = vec![0.0; n];
    for _ in 0..horizon {
        let mut delta: f64 = 0.0;
        for &x in m.states() {
            let mut px = 0.0;
            for a in 0..base.num_actions {
                let w = policy.prob(x, a);
                if w == 0.0 {
                    continue;
                }
                let mut reach = 0.0;
                for (sp, &q) in m.kernel_row(x, a).iter().enumerate() {
                    if q > 0.0 {
                        reach += q * if m.is_interior(sp) { p[sp] } else { 1.0 };
                    }
                }
                px += w * reach;
            }
            delta = delta.max((px - p[x]).abs());
            p_next[x] = px;
        }
        std::mem::swap(&mut p, &mut p_next);
        if delta < 1e-14 {
            break;
        }
    }
    p[s]
}

/// The relaxed explore-or-exploit rule: exploit once the exploration policy's
/// terminal-reach probability drops to `epsilon / G_max(T)`.
pub fn should_exploit(
    explore_policy: &TabularPolicy,
    explore_model: &InducedCmdp<'_>,
    epsilon: f64,
    g_max_horizon: f64,
    horizon: usize,
    s: usize,
) -> bool {
    let p_hat = terminal_reach_probability(explore_model, explore_policy, s, horizon);
    p_hat <= epsilon / g_max_horizon
}

/// Variance-tightened budget `d - 3 sqrt(Var_max_c) / (1 - gamma)` with the
/// Chebyshev-Cantelli miss bound for the three-sigma margin.
pub fn tightened_budget(d: f64, gamma: f64, var_max_c: f64, c_max: f64) -> Result<(f64, f64)> {
    let s_c = var_max_c.sqrt() / (1.0 - gamma);
    let d_s = d - 3.0 * s_c;
    if d_s <= 2.0 * c_max {
        return Err(E4Error::ConfigInfeasible {
            l: d_s - 2.0 * c_max,
            min_d: 2.0 * c_max + 3.0 * s_c,
        });
    }
    Ok((d_s, 0.1))
}

/// Bound on exploration attempts before every state can become known:
/// `ceil((G/eps) (ln(S/delta) + m_known))`.
pub fn attempt_bound(
    num_states: usize,
    m_known: u32,
    epsilon: f64,
    g_max_horizon: f64,
    delta: f64,
) -> u64 {
    let n = (g_max_horizon / epsilon) * ((num_states as f64 / delta).ln() + m_known as f64);
    n.ceil() as u64
}

/// Which offline optimiser solves the three policies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverKind {
    PolicyGradient,
    LagrangianDp,
    OccupationLp,
}

/// Uncertainty set used for the escape solve. Exploitation and exploration
/// run on the nominal empirical model: known states carry trusted statistics,
/// and their approximation error is what the `l` slack absorbs.
#[derive(Clone, Debug)]
pub enum UncertaintyKind {
    /// Singleton on the empirical kernel.
    Nominal,
    /// L1 balls with Hoeffding radii from visit counts.
    L1,
    /// Bayesian credible regions from Dirichlet posteriors (small instances;
    /// the radii are re-sampled at every solve).
    Bayes,
    /// Expert action models, filtered against the recent path.
    Models(ModelSet),
    /// Caller-supplied set (oracle-backed tests).
    Supplied(UncertaintySet),
}

/// Driver configuration. `m_known` is a direct parameter: the theoretical
/// bound is astronomically conservative and is only reported alongside.
#[derive(Clone, Debug)]
pub struct E4Config {
    pub budget: f64,
    pub gamma: f64,
    pub r_max: f64,
    pub c_max: f64,
    pub m_known: u32,
    pub epsilon_mode: EpsilonMode,
    pub solver: SolverKind,
    pub solver_iterations: usize,
    pub warm_start: bool,
    pub uncertainty: UncertaintyKind,
    pub filter_threshold: f64,
    pub delta: f64,
    pub delta_psi: f64,
    pub max_steps: usize,
    pub seed: u64,
    /// Apply the Chebyshev-Cantelli tightening before deriving budgets.
    pub tighten_budget: bool,
    pub var_max_c: f64,
    pub kappa: f64,
    pub initial_known: Vec<usize>,
}

impl E4Config {
    pub fn validate(&self) -> Result<()> {
        if self.budget <= 2.0 * self.c_max {
            return Err(E4Error::InvalidArgument(format!(
                "budget {} must exceed 2 c_max = {}",
                self.budget,
                2.0 * self.c_max
            )));
        }
        for &(name, x) in &[("delta", self.delta), ("delta_psi", self.delta_psi)] {
            if !(0.0..1.0).contains(&x) || x == 0.0 {
                return Err(E4Error::InvalidArgument(format!("{name} must lie in (0,1), got {x}")));
            }
        }
        if self.initial_known.is_empty() {
            return Err(E4Error::InvalidArgument("initial known set must not be empty".into()));
        }
        if self.m_known == 0 {
            return Err(E4Error::InvalidArgument("m_known must be positive".into()));
        }
        Ok(())
    }
}

/// Phases a step can belong to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Exploit,
    Explore,
    Wander,
    Escape,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Exploit => "exploit",
            Phase::Explore => "explore",
            Phase::Wander => "wander",
            Phase::Escape => "escape",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LogStep {
    pub step: usize,
    pub trajectory: usize,
    pub phase: Phase,
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub cost: f64,
    /// Discounted cost accumulated within the current trajectory.
    pub disc_cost_traj: f64,
    pub known_count: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct TrajectorySummary {
    pub id: usize,
    /// Exploit/Explore for known-state trajectories; Wander marks excursions.
    pub kind: Phase,
    pub start: usize,
    pub steps: usize,
    pub discounted_cost: f64,
    /// The phase budget this trajectory was held to (`l` or `d'`).
    pub budget: f64,
    /// Step index at which wandering handed over to the escape policy.
    pub switched_at: Option<usize>,
    /// Whether the excursion ended inside the known set.
    pub ended_known: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HaltReason {
    /// The relaxed rule favoured exploitation and the exploitation policy is
    /// within epsilon of the model optimum.
    Converged,
    StepLimit,
    Aborted(String),
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct RunLog {
    pub steps: Vec<LogStep>,
    pub trajectories: Vec<TrajectorySummary>,
    pub halt: HaltReason,
    pub params: SafetyParams,
    pub exploration_attempts: usize,
    pub known_at_halt: usize,
    pub num_states: usize,
    pub final_policy: Option<TabularPolicy>,
    /// Model value of the final exploitation policy at the halt state.
    pub final_value: f64,
    /// Trajectories whose realised discounted cost exceeded their phase
    /// budget by more than one `c_max` step.
    pub budget_violations: usize,
    /// Non-episodic diagnostic: cost discounted from step zero of the run.
    pub global_discounted_cost: f64,
    pub seeding_samples: usize,
    /// The theoretical visit bound at these settings, for reporting.
    pub theoretical_m_known: f64,
}

struct Solved {
    policy: TabularPolicy,
    values: Vec<f64>,
    warm_values: Option<Vec<f64>>,
    warm_theta: Option<Vec<f64>>,
}

#[derive(Default)]
struct WarmSlot {
    values: Option<Vec<f64>>,
    theta: Option<Vec<f64>>,
}

fn solve_role(
    m: &InducedCmdp<'_>,
    set: &UncertaintySet,
    budget: f64,
    horizon: usize,
    cfg: &E4Config,
    warm: &WarmSlot,
) -> Result<Solved> {
    let scfg = SolverConfig::new(cfg.solver_iterations.max(1), horizon).with_seed(cfg.seed);
    let warm_values = if cfg.warm_start { warm.values.as_deref() } else { None };
    match cfg.solver {
        SolverKind::LagrangianDp => {
            match solve_lagrangian_dp_warm(m, set, budget, &scfg, warm_values) {
                Ok((outcome, values)) => Ok(Solved {
                    policy: outcome.policy,
                    warm_values: Some(values.clone()),
                    values,
                    warm_theta: None,
                }),
                Err(E4Error::Infeasible { .. }) => {
                    // Budget unreachable even robustly: act to minimise the
                    // worst-case cost instead of giving up the run.
                    log::warn!("robust budget {budget} infeasible; using the cost-minimising policy");
                    let (_, policy) = robust_value_iteration(m, set, 1e12, horizon)?;
                    let values = crate::solvers::robust_policy_value(m, set, &policy, horizon);
                    Ok(Solved {
                        policy,
                        warm_values: Some(values.clone()),
                        values,
                        warm_theta: None,
                    })
                }
                Err(e) => Err(e),
            }
        }
        SolverKind::OccupationLp => {
            let report = match solve_occupation_lp(m, budget, None) {
                Ok(r) => r,
                Err(E4Error::Infeasible { .. }) => {
                    log::warn!("occupation LP budget {budget} infeasible; minimising cost");
                    let (_, policy) = robust_value_iteration(m, set, 1e12, horizon)?;
                    let values =
                        crate::solvers::robust_policy_value(m, set, &policy, horizon);
                    return Ok(Solved {
                        policy,
                        warm_values: None,
                        values,
                        warm_theta: None,
                    });
                }
                Err(e) => return Err(e),
            };
            let ev = evaluate_policy(m, &report.policy, Horizon::Steps(horizon))?;
            Ok(Solved {
                policy: report.policy,
                values: ev.values,
                warm_values: None,
                warm_theta: None,
            })
        }
        SolverKind::PolicyGradient => {
            let warm_theta = if cfg.warm_start { warm.theta.as_deref() } else { None };
            let out = solve_policy_gradient_from(m, set, budget, &scfg, warm_theta)?;
            let ev = evaluate_policy(m, &out.policy, Horizon::Steps(horizon))?;
            let theta = out.policy.logits().map(|l| l.to_vec());
            Ok(Solved {
                policy: out.policy,
                values: ev.values,
                warm_values: None,
                warm_theta: theta,
            })
        }
    }
}

fn build_escape_set(
    cfg: &E4Config,
    kb: &KnowledgeBase,
    m_hat: &Cmdp,
    unknown: &[usize],
    recent: &VecDeque<Step>,
) -> Result<UncertaintySet> {
    match &cfg.uncertainty {
        UncertaintyKind::Nominal => Ok(UncertaintySet::singleton_from(m_hat)),
        UncertaintyKind::L1 => {
            let pairs = m_hat.num_states * m_hat.num_actions;
            let mut psi = vec![0.0; pairs];
            let mut in_subset = vec![false; m_hat.num_states];
            for &s in unknown {
                in_subset[s] = true;
            }
            for s in 0..m_hat.num_states {
                for a in 0..m_hat.num_actions {
                    psi[s * m_hat.num_actions + a] = if in_subset[s] {
                        hoeffding_budget(
                            kb.count(s, a) as usize,
                            m_hat.num_states,
                            m_hat.num_actions,
                            cfg.delta_psi,
                            PsiConvention::Paper,
                        )?
                    } else {
                        0.0
                    };
                }
            }
            UncertaintySet::l1_from(m_hat, psi)
        }
        UncertaintyKind::Bayes => {
            let mut mask = vec![false; m_hat.num_states * m_hat.num_actions];
            for &s in unknown {
                for a in 0..m_hat.num_actions {
                    mask[s * m_hat.num_actions + a] = true;
                }
            }
            let n = m_hat.num_states;
            let mut pseudo = vec![0.0; n * m_hat.num_actions * n];
            for s in 0..n {
                for a in 0..m_hat.num_actions {
                    let counts = kb.transition_counts(s, a);
                    for (sp, &c) in counts.iter().enumerate() {
                        pseudo[(s * m_hat.num_actions + a) * n + sp] = c as f64 + 1.0;
                    }
                }
            }
            let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(0xBA1E5));
            UncertaintySet::credible_from_masked(
                n,
                m_hat.num_actions,
                pseudo,
                cfg.delta_psi,
                1000,
                Some(&mask),
                &mut rng,
            )
        }
        UncertaintyKind::Models(ms) => {
            let path: Vec<Step> = recent.iter().cloned().collect();
            Ok(UncertaintySet::Models(filter_models(ms, &path, cfg.filter_threshold)))
        }
        UncertaintyKind::Supplied(set) => Ok(set.clone()),
    }
}

const RECENT_PATH_CAP: usize = 50;

/// Runs the full loop against a sample-only environment.
pub fn run(env: &mut SampleEnv, cfg: &E4Config) -> Result<RunLog> {
    cfg.validate()?;
    let num_states = env.num_states();
    let num_actions = env.num_actions();
    for &s in &cfg.initial_known {
        if s >= num_states {
            return Err(E4Error::InvalidArgument(format!("initial known state {s} out of range")));
        }
    }
    let (effective_budget, _miss) = if cfg.tighten_budget {
        tightened_budget(cfg.budget, cfg.gamma, cfg.var_max_c, cfg.c_max)?
    } else {
        (cfg.budget, 0.0)
    };
    let params = derive_safety_params(
        effective_budget,
        cfg.gamma,
        cfg.c_max,
        cfg.r_max,
        cfg.epsilon_mode,
    )?;
    let shape = ModelShape {
        num_states,
        num_actions,
        r_max: cfg.r_max,
        c_max: cfg.c_max,
    };
    let g_horizon = g_max_t(cfg.gamma, cfg.r_max.max(cfg.c_max), params.horizon);
    let theoretical_m_known = {
        let ratio = num_states as f64 * params.horizon as f64 * g_horizon / params.epsilon;
        cfg.kappa * ratio.powi(4) * cfg.var_max_c.max(1e-12) * (1.0 / cfg.delta).ln()
    };

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(1));
    let mut kb = KnowledgeBase::new(num_states, num_actions, cfg.m_known);

    // Prior experience: the initial known strip is seeded with m_known real
    // samples per action so its statistics are honest.
    let mut seeding_samples = 0usize;
    for &s in &cfg.initial_known {
        for a in 0..num_actions {
            for _ in 0..cfg.m_known {
                env.reset_to(s)?;
                let (r, c, next) = env.sample(s, a)?;
                kb.record(s, a, r, c, next)?;
                seeding_samples += 1;
            }
        }
    }
    let mut current = cfg.initial_known[rng.gen_range(0..cfg.initial_known.len())];
    env.reset_to(current)?;

    let mut log_steps: Vec<LogStep> = Vec::new();
    let mut trajectories: Vec<TrajectorySummary> = Vec::new();
    let mut recent: VecDeque<Step> = VecDeque::new();
    let mut exploit_warm = WarmSlot::default();
    let mut explore_warm = WarmSlot::default();
    let mut escape_warm = WarmSlot::default();
    let mut step_counter = 0usize;
    let mut trajectory_counter = 0usize;
    let mut attempts = 0usize;
    let mut budget_violations = 0usize;
    let mut global_cost = 0.0f64;
    let mut halt: Option<HaltReason> = None;
    let mut final_policy: Option<TabularPolicy> = None;
    let mut final_value = 0.0f64;

    macro_rules! record_step {
        ($phase:expr, $traj:expr, $s:expr, $a:expr, $r:expr, $c:expr, $disc:expr) => {{
            log_steps.push(LogStep {
                step: step_counter,
                trajectory: $traj,
                phase: $phase,
                state: $s,
                action: $a,
                reward: $r,
                cost: $c,
                disc_cost_traj: $disc,
                known_count: kb.known_partition().0.len(),
            });
        }};
    }

    'main: while halt.is_none() {
        let (known, unknown) = kb.known_partition();
        let m_hat = kb.estimate_model(shape, cfg.gamma, effective_budget)?;
        let nominal = UncertaintySet::singleton_from(&m_hat);

        let exploit_m = induce(&m_hat, &known, InducedVariant::Exploit, params.l)?;
        let explore_m = induce(&m_hat, &known, InducedVariant::Explore, params.l)?;
        let exploit_sol = solve_role(&exploit_m, &nominal, params.l, params.horizon, cfg, &exploit_warm)?;
        let explore_sol = solve_role(&explore_m, &nominal, params.l, params.horizon, cfg, &explore_warm)?;
        exploit_warm.values = exploit_sol.warm_values.clone();
        exploit_warm.theta = exploit_sol.warm_theta.clone();
        explore_warm.values = explore_sol.warm_values.clone();
        explore_warm.theta = explore_sol.warm_theta.clone();

        let escape = if unknown.is_empty() {
            None
        } else {
            let escape_m = induce(&m_hat, &unknown, InducedVariant::Escape, params.d_prime)?;
            let set = build_escape_set(cfg, &kb, &m_hat, &unknown, &recent)?;
            let sol = solve_role(
                &escape_m,
                &set,
                params.d_prime,
                2 * params.escape_horizon,
                cfg,
                &escape_warm,
            )?;
            escape_warm.values = sol.warm_values.clone();
            escape_warm.theta = sol.warm_theta.clone();
            let cost_togo =
                robust_policy_cost(&escape_m, &set, &sol.policy, 2 * params.escape_horizon);
            Some((sol.policy, cost_togo, set))
        };

        // Explore or exploit from a known state.
        if kb.is_known(current) {
            let exploit_now = should_exploit(
                &explore_sol.policy,
                &explore_m,
                params.epsilon,
                g_max_t(cfg.gamma, cfg.r_max, params.horizon),
                params.horizon,
                current,
            );
            let (policy, phase) = if exploit_now {
                // Halt once the exploitation policy is epsilon-close to the
                // model optimum at the current state.
                if exploit_sol.values[current] >= model_optimum_at(
                    &exploit_m,
                    &nominal,
                    params.l,
                    params.horizon,
                    cfg,
                    &exploit_sol,
                    current,
                )? - params.epsilon
                {
                    final_policy = Some(exploit_sol.policy.clone());
                    final_value = exploit_sol.values[current];
                    halt = Some(HaltReason::Converged);
                    break 'main;
                }
                (&exploit_sol.policy, Phase::Exploit)
            } else {
                attempts += 1;
                (&explore_sol.policy, Phase::Explore)
            };

            trajectory_counter += 1;
            let traj_id = trajectory_counter;
            let start = current;
            let mut disc = 1.0f64;
            let mut traj_cost = 0.0f64;
            let mut steps_taken = 0usize;
            for _ in 0..params.horizon {
                let a = policy.sample_action(current, &mut rng);
                let (r, c, next) = match env.sample(current, a) {
                    Ok(x) => x,
                    Err(e) => {
                        halt = Some(HaltReason::Aborted(e.to_string()));
                        break 'main;
                    }
                };
                kb.record(current, a, r, c, next)?;
                traj_cost += disc * c;
                global_cost += cfg.gamma.powi(step_counter as i32) * c;
                push_recent(&mut recent, Step { state: current, action: a, reward: r, cost: c, next_state: next });
                record_step!(phase, traj_id, current, a, r, c, traj_cost);
                step_counter += 1;
                steps_taken += 1;
                disc *= cfg.gamma;
                current = next;
                if step_counter >= cfg.max_steps {
                    halt = Some(HaltReason::StepLimit);
                    break;
                }
                if !kb.is_known(current) {
                    break;
                }
            }
            if traj_cost > params.l + cfg.c_max {
                budget_violations += 1;
            }
            trajectories.push(TrajectorySummary {
                id: traj_id,
                kind: phase,
                start,
                steps: steps_taken,
                discounted_cost: traj_cost,
                budget: params.l,
                switched_at: None,
                ended_known: kb.is_known(current),
            });
            if halt.is_some() {
                break 'main;
            }
        }

        // Balanced wandering with monitored escape inside the unknown set.
        if !kb.is_known(current) {
            let Some((escape_policy, cost_togo, set)) = &escape else {
                return Err(E4Error::RunAborted(
                    "current state unknown but no escape policy was solvable".into(),
                ));
            };
            trajectory_counter += 1;
            let traj_id = trajectory_counter;
            let start = current;
            let mut wandering = true;
            let mut switched_at = None;
            let mut disc = 1.0f64;
            let mut traj_cost = 0.0f64;
            let mut steps_taken = 0usize;
            for t in 0..params.escape_horizon {
                if wandering
                    && wandering_switch(
                        traj_cost,
                        t,
                        cfg.gamma,
                        set,
                        cost_togo,
                        current,
                        num_actions,
                        params.d_prime,
                        cfg.c_max,
                    )
                {
                    wandering = false;
                    switched_at = Some(t);
                }
                let a = if wandering {
                    balanced_action(kb.counts_row(current))
                } else {
                    escape_policy.sample_action(current, &mut rng)
                };
                let (r, c, next) = match env.sample(current, a) {
                    Ok(x) => x,
                    Err(e) => {
                        halt = Some(HaltReason::Aborted(e.to_string()));
                        break 'main;
                    }
                };
                kb.record(current, a, r, c, next)?;
                traj_cost += disc * c;
                global_cost += cfg.gamma.powi(step_counter as i32) * c;
                push_recent(&mut recent, Step { state: current, action: a, reward: r, cost: c, next_state: next });
                record_step!(
                    if wandering { Phase::Wander } else { Phase::Escape },
                    traj_id,
                    current,
                    a,
                    r,
                    c,
                    traj_cost
                );
                step_counter += 1;
                steps_taken += 1;
                disc *= cfg.gamma;
                current = next;
                if step_counter >= cfg.max_steps {
                    halt = Some(HaltReason::StepLimit);
                    break;
                }
                if kb.is_known(current) {
                    break;
                }
            }
            if traj_cost > params.d_prime + cfg.c_max {
                budget_violations += 1;
            }
            trajectories.push(TrajectorySummary {
                id: traj_id,
                kind: Phase::Wander,
                start,
                steps: steps_taken,
                discounted_cost: traj_cost,
                budget: params.d_prime,
                switched_at,
                ended_known: kb.is_known(current),
            });
        }
    }

    let halt = halt.unwrap_or(HaltReason::StepLimit);
    if final_policy.is_none() {
        // Step-limited or aborted: report the last exploitation policy.
        let (known, _) = kb.known_partition();
        let m_hat = kb.estimate_model(shape, cfg.gamma, effective_budget)?;
        let nominal = UncertaintySet::singleton_from(&m_hat);
        let exploit_m = induce(&m_hat, &known, InducedVariant::Exploit, params.l)?;
        if let Ok(sol) = solve_role(&exploit_m, &nominal, params.l, params.horizon, cfg, &exploit_warm) {
            final_value = sol.values[current.min(num_states - 1)];
            final_policy = Some(sol.policy);
        }
    }
    let known_at_halt = kb.known_partition().0.len();
    Ok(RunLog {
        steps: log_steps,
        trajectories,
        halt,
        params,
        exploration_attempts: attempts,
        known_at_halt,
        num_states,
        final_policy,
        final_value,
        budget_violations,
        global_discounted_cost: global_cost,
        seeding_samples,
        theoretical_m_known,
    })
}

fn push_recent(recent: &mut VecDeque<Step>, step: Step) {
    if recent.len() == RECENT_PATH_CAP {
        recent.pop_front();
    }
    recent.push_back(step);
}

/// The model-optimal constrained value at one state: identical to the solved
/// values when the solver is exact, a fresh reference solve for the
/// gradient-based solver.
fn model_optimum_at(
    m: &InducedCmdp<'_>,
    set: &UncertaintySet,
    budget: f64,
    horizon: usize,
    cfg: &E4Config,
    sol: &Solved,
    s: usize,
) -> Result<f64> {
    match cfg.solver {
        SolverKind::LagrangianDp | SolverKind::OccupationLp => Ok(sol.values[s]),
        SolverKind::PolicyGradient => {
            let scfg = SolverConfig::new(1, horizon);
            let (outcome, values) = solve_lagrangian_dp_warm(m, set, budget, &scfg, None)?;
            let _ = outcome;
            Ok(values[s])
        }
    }
}

//! Tabular constrained MDPs, induced sub-CMDPs, policies, and exact evaluation.
//!
//! A [`Cmdp`] stores the transition kernel, mean rewards and constraint-costs,
//! the discount, and the global cost budget. An [`InducedCmdp`] restricts a
//! CMDP to a subset of states with an absorbing terminal capturing every exit;
//! the exploitation, exploration, and escape problems are all expressed this
//! way. Value vectors are always indexed by base-space state id: entries for
//! states outside the subset hold the terminal continuation value, so the same
//! vector feeds kernel dot products without any index translation.

use rand::Rng;

use crate::error::{E4Error, Result};

const ROW_SUM_TOL: f64 = 1e-12;

/// Sampling distribution family for reward and constraint-cost draws.
///
/// The mean is always the tabulated `r(s,a)` / `c(s,a)`; the family only
/// shapes the noise around it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    /// Samples always yield the mean.
    Deterministic,
    /// Gaussian around the mean, truncated (clamped) to the valid range.
    Gaussian,
}

/// Noise family plus per-(s,a) variance.
#[derive(Clone, Debug)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub var: Vec<f64>,
}

impl NoiseSpec {
    pub fn deterministic(num_pairs: usize) -> Self {
        NoiseSpec {
            kind: NoiseKind::Deterministic,
            var: vec![0.0; num_pairs],
        }
    }

    pub fn gaussian(num_pairs: usize, var: f64) -> Self {
        NoiseSpec {
            kind: NoiseKind::Gaussian,
            var: vec![var; num_pairs],
        }
    }

    pub fn max_var(&self) -> f64 {
        self.var.iter().cloned().fold(0.0, f64::max)
    }

    /// Draws one sample with the given mean, clamped to `[lo, hi]`.
    pub fn sample<R: Rng + ?Sized>(&self, pair: usize, mean: f64, lo: f64, hi: f64, rng: &mut R) -> f64 {
        match self.kind {
            NoiseKind::Deterministic => mean,
            NoiseKind::Gaussian => {
                let sd = self.var[pair].sqrt();
                if sd == 0.0 {
                    return mean;
                }
                let draw: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * sd + mean;
                draw.clamp(lo, hi)
            }
        }
    }
}

/// A tabular constrained MDP.
#[derive(Clone, Debug)]
pub struct Cmdp {
    pub num_states: usize,
    pub num_actions: usize,
    pub gamma: f64,
    /// Budget `d` on the asymptotic discounted constraint-cost.
    pub budget: f64,
    pub r_max: f64,
    pub c_max: f64,
    pub var_max: f64,
    pub var_max_c: f64,
    pub reward_noise: NoiseSpec,
    pub cost_noise: NoiseSpec,
    kernel: Vec<f64>,
    rewards: Vec<f64>,
    costs: Vec<f64>,
}

impl Cmdp {
    /// Builds and validates a CMDP. `kernel` is laid out `[s][a][s']`
    /// state-major, `rewards`/`costs` are `[s][a]`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        num_states: usize,
        num_actions: usize,
        gamma: f64,
        budget: f64,
        r_max: f64,
        c_max: f64,
        kernel: Vec<f64>,
        rewards: Vec<f64>,
        costs: Vec<f64>,
    ) -> Result<Self> {
        let pairs = num_states * num_actions;
        let m = Cmdp {
            num_states,
            num_actions,
            gamma,
            budget,
            r_max,
            c_max,
            var_max: 0.0,
            var_max_c: 0.0,
            reward_noise: NoiseSpec::deterministic(pairs),
            cost_noise: NoiseSpec::deterministic(pairs),
            kernel,
            rewards,
            costs,
        };
        m.validate()?;
        Ok(m)
    }

    /// Replaces the noise model; `var_max`/`var_max_c` follow the new spec.
    pub fn with_noise(mut self, reward_noise: NoiseSpec, cost_noise: NoiseSpec) -> Result<Self> {
        let pairs = self.num_states * self.num_actions;
        if reward_noise.var.len() != pairs || cost_noise.var.len() != pairs {
            return Err(E4Error::ShapeMismatch {
                expected: format!("{pairs} noise variances"),
                got: format!("{} / {}", reward_noise.var.len(), cost_noise.var.len()),
            });
        }
        self.var_max = reward_noise.max_var();
        self.var_max_c = cost_noise.max_var();
        self.reward_noise = reward_noise;
        self.cost_noise = cost_noise;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let (s_count, a_count) = (self.num_states, self.num_actions);
        if s_count == 0 || a_count == 0 {
            return Err(E4Error::InvalidArgument("empty state or action space".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(E4Error::InvalidArgument(format!(
                "discount must lie in [0,1), got {}",
                self.gamma
            )));
        }
        if self.kernel.len() != s_count * a_count * s_count {
            return Err(E4Error::ShapeMismatch {
                expected: format!("{} kernel entries", s_count * a_count * s_count),
                got: format!("{}", self.kernel.len()),
            });
        }
        if self.rewards.len() != s_count * a_count || self.costs.len() != s_count * a_count {
            return Err(E4Error::ShapeMismatch {
                expected: format!("{} reward/cost entries", s_count * a_count),
                got: format!("{} / {}", self.rewards.len(), self.costs.len()),
            });
        }
        for s in 0..s_count {
            for a in 0..a_count {
                let row = self.kernel_row(s, a);
                let mut sum = 0.0;
                for (sp, &p) in row.iter().enumerate() {
                    if p < 0.0 {
                        return Err(E4Error::InvalidArgument(format!(
                            "negative transition probability at (s={s}, a={a}, s'={sp}): {p}"
                        )));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(E4Error::InvalidArgument(format!(
                        "kernel row (s={s}, a={a}) sums to {sum:.15}, expected 1"
                    )));
                }
                let r = self.reward(s, a);
                if r < 0.0 || r > self.r_max {
                    return Err(E4Error::InvalidArgument(format!(
                        "reward at (s={s}, a={a}) = {r} outside [0, {}]",
                        self.r_max
                    )));
                }
                let c = self.cost(s, a);
                if c < 0.0 || c > self.c_max {
                    return Err(E4Error::InvalidArgument(format!(
                        "cost at (s={s}, a={a}) = {c} outside [0, {}]",
                        self.c_max
                    )));
                }
            }
        }
        if self.budget <= 2.0 * self.c_max {
            return Err(E4Error::InvalidArgument(format!(
                "budget d = {} must exceed 2*c_max = {}",
                self.budget,
                2.0 * self.c_max
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn kernel_row(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.num_actions + a) * self.num_states;
        &self.kernel[base..base + self.num_states]
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.num_actions + a]
    }

    #[inline]
    pub fn cost(&self, s: usize, a: usize) -> f64 {
        self.costs[s * self.num_actions + a]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    /// Upper bound on the T-step return, `r_max (1 - gamma^T) / (1 - gamma)`.
    pub fn g_max(&self, horizon: usize) -> f64 {
        g_max_t(self.gamma, self.r_max, horizon)
    }

    /// Upper bound on the T-step constraint-cost.
    pub fn g_max_cost(&self, horizon: usize) -> f64 {
        g_max_t(self.gamma, self.c_max, horizon)
    }

    /// The whole CMDP viewed as an induced model with an unreachable terminal.
    pub fn full_view(&self) -> InducedCmdp<'_> {
        let all: Vec<usize> = (0..self.num_states).collect();
        induce(self, &all, InducedVariant::Exploit, self.budget)
            .expect("full state set is never empty")
    }

    /// Exact evaluation of a policy on this CMDP (means everywhere).
    pub fn evaluate(&self, policy: &TabularPolicy, horizon: Horizon) -> Result<Evaluation> {
        evaluate_policy(&self.full_view(), policy, horizon)
    }
}

/// Upper bound for a T-step discounted sum with per-step magnitude `peak`.
pub fn g_max_t(gamma: f64, peak: f64, horizon: usize) -> f64 {
    if gamma == 0.0 {
        return peak;
    }
    peak * (1.0 - gamma.powi(horizon as i32)) / (1.0 - gamma)
}

/// Smallest horizon making T-step values and costs epsilon-close to their
/// asymptotic counterparts: `ceil((1/(1-gamma)) ln(max(r_max,c_max)/(eps(1-gamma))))`,
/// clamped below at 1.
pub fn epsilon_horizon(gamma: f64, r_max: f64, c_max: f64, eps: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(E4Error::InvalidArgument(format!(
            "discount must lie in [0,1), got {gamma}"
        )));
    }
    if eps <= 0.0 {
        return Err(E4Error::InvalidArgument(format!("epsilon must be positive, got {eps}")));
    }
    let peak = r_max.max(c_max);
    if peak <= 0.0 {
        return Err(E4Error::InvalidArgument("max(r_max, c_max) must be positive".into()));
    }
    let t = (1.0 / (1.0 - gamma)) * (peak / (eps * (1.0 - gamma))).ln();
    Ok(if t < 1.0 { 1 } else { t.ceil() as usize })
}

/// Evaluation horizon: an exact T-step recursion or the asymptotic fixed point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Horizon {
    Steps(usize),
    Infinite,
}

/// A stochastic tabular policy, optionally backed by softmax logits.
#[derive(Clone, Debug)]
pub struct TabularPolicy {
    pub num_states: usize,
    pub num_actions: usize,
    probs: Vec<f64>,
    logits: Option<Vec<f64>>,
}

impl TabularPolicy {
    pub fn from_probs(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != num_states * num_actions {
            return Err(E4Error::ShapeMismatch {
                expected: format!("{} probabilities", num_states * num_actions),
                got: format!("{}", probs.len()),
            });
        }
        for s in 0..num_states {
            let row = &probs[s * num_actions..(s + 1) * num_actions];
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&p| p < 0.0) {
                return Err(E4Error::InvalidArgument(format!(
                    "policy row for state {s} is not a distribution (sum {sum:.15})"
                )));
            }
        }
        Ok(TabularPolicy {
            num_states,
            num_actions,
            probs,
            logits: None,
        })
    }

    /// Row-softmax of the given logits.
    pub fn from_logits(num_states: usize, num_actions: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != num_states * num_actions {
            return Err(E4Error::ShapeMismatch {
                expected: format!("{} logits", num_states * num_actions),
                got: format!("{}", logits.len()),
            });
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(E4Error::InvalidArgument("non-finite logit".into()));
        }
        let mut probs = vec![0.0; logits.len()];
        for s in 0..num_states {
            let row = &logits[s * num_actions..(s + 1) * num_actions];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (a, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                probs[s * num_actions + a] = e;
                z += e;
            }
            for a in 0..num_actions {
                probs[s * num_actions + a] /= z;
            }
        }
        Ok(TabularPolicy {
            num_states,
            num_actions,
            probs,
            logits: Some(logits),
        })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        TabularPolicy {
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; num_states * num_actions],
            logits: None,
        }
    }

    /// Deterministic policy from an action-per-state table.
    pub fn deterministic(num_states: usize, num_actions: usize, actions: &[usize]) -> Result<Self> {
        if actions.len() != num_states {
            return Err(E4Error::ShapeMismatch {
                expected: format!("{num_states} actions"),
                got: format!("{}", actions.len()),
            });
        }
        let mut probs = vec![0.0; num_states * num_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return Err(E4Error::InvalidArgument(format!(
                    "action {a} out of range for state {s}"
                )));
            }
            probs[s * num_actions + a] = 1.0;
        }
        Ok(TabularPolicy {
            num_states,
            num_actions,
            probs,
            logits: None,
        })
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.num_actions..(s + 1) * self.num_actions]
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.num_actions + a]
    }

    pub fn logits(&self) -> Option<&[f64]> {
        self.logits.as_deref()
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        sample_index(self.row(s), rng)
    }

    /// Statewise mixture `w * self + (1 - w) * other`.
    pub fn mix(&self, other: &TabularPolicy, w: f64) -> Result<TabularPolicy> {
        if self.num_states != other.num_states || self.num_actions != other.num_actions {
            return Err(E4Error::ShapeMismatch {
                expected: format!("{}x{}", self.num_states, self.num_actions),
                got: format!("{}x{}", other.num_states, other.num_actions),
            });
        }
        let probs = self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(&p, &q)| w * p + (1.0 - w) * q)
            .collect();
        TabularPolicy::from_probs(self.num_states, self.num_actions, probs)
    }
}

/// Draws an index from an unnormalised non-negative weight row.
pub fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// One environment interaction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub cost: f64,
    pub next_state: usize,
}

/// A sampled path. Steps must chain: `steps[t].next_state == steps[t+1].state`.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub start: usize,
    steps: Vec<Step>,
}

impl Trajectory {
    pub fn new(start: usize) -> Self {
        Trajectory { start, steps: Vec::new() }
    }

    pub fn push(&mut self, step: Step) -> Result<()> {
        let expected = self.steps.last().map_or(self.start, |last| last.next_state);
        if step.state != expected {
            return Err(E4Error::InvalidArgument(format!(
                "trajectory break: step starts at {} but previous step ended at {expected}",
                step.state
            )));
        }
        self.steps.push(step);
        Ok(())
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Discounted sampled return and constraint-cost of a path.
pub fn path_return_and_cost(tr: &Trajectory, gamma: f64) -> (f64, f64) {
    let mut v = 0.0;
    let mut c = 0.0;
    let mut disc = 1.0;
    for step in tr.steps() {
        v += disc * step.reward;
        c += disc * step.cost;
        disc *= gamma;
    }
    (v, c)
}

/// Which induced problem a subset restriction expresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InducedVariant {
    /// Plain restriction: solve the CMDP inside the subset.
    Exploit,
    /// Interior rewards zeroed, reaching the terminal pays `r_max` once.
    Explore,
    /// Worst-case escape: every interior cost is `c_max`.
    Escape,
}

/// A CMDP restricted to a state subset with an absorbing terminal.
///
/// The terminal is the dedicated extra index `num_states` of the base model;
/// base state ids stay stable. Interior rewards and costs are deterministic
/// means. Reaching the terminal pays `terminal_reward` / `terminal_cost` once
/// at arrival, then everything is zero.
#[derive(Clone, Debug)]
pub struct InducedCmdp<'a> {
    base: &'a Cmdp,
    subset: Vec<usize>,
    interior: Vec<bool>,
    pub variant: InducedVariant,
    pub budget: f64,
    pub terminal_reward: f64,
    pub terminal_cost: f64,
    pub reward_override: Option<f64>,
    pub cost_override: Option<f64>,
}

/// Restricts `m` to `subset` under the given variant and budget.
pub fn induce<'a>(
    m: &'a Cmdp,
    subset: &[usize],
    variant: InducedVariant,
    budget: f64,
) -> Result<InducedCmdp<'a>> {
    if subset.is_empty() {
        return Err(E4Error::InvalidArgument("induced subset must be non-empty".into()));
    }
    let mut interior = vec![false; m.num_states];
    for &s in subset {
        if s >= m.num_states {
            return Err(E4Error::InvalidArgument(format!("subset state {s} out of range")));
        }
        interior[s] = true;
    }
    let mut subset: Vec<usize> = subset.to_vec();
    subset.sort_unstable();
    subset.dedup();
    let (terminal_reward, terminal_cost, reward_override, cost_override) = match variant {
        InducedVariant::Exploit => (0.0, 0.0, None, None),
        InducedVariant::Explore => (m.r_max, 0.0, Some(0.0), None),
        InducedVariant::Escape => (0.0, 0.0, None, Some(m.c_max)),
    };
    Ok(InducedCmdp {
        base: m,
        subset,
        interior,
        variant,
        budget,
        terminal_reward,
        terminal_cost,
        reward_override,
        cost_override,
    })
}

impl<'a> InducedCmdp<'a> {
    pub fn base(&self) -> &'a Cmdp {
        self.base
    }

    /// Interior (non-terminal) states, sorted by base id.
    pub fn states(&self) -> &[usize] {
        &self.subset
    }

    /// The dedicated terminal index.
    pub fn terminal_id(&self) -> usize {
        self.base.num_states
    }

    #[inline]
    pub fn is_interior(&self, s: usize) -> bool {
        self.interior[s]
    }

    pub fn gamma(&self) -> f64 {
        self.base.gamma
    }

    pub fn num_base_states(&self) -> usize {
        self.base.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.base.num_actions
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward_override.unwrap_or_else(|| self.base.reward(s, a))
    }

    #[inline]
    pub fn cost(&self, s: usize, a: usize) -> f64 {
        self.cost_override.unwrap_or_else(|| self.base.cost(s, a))
    }

    #[inline]
    pub fn kernel_row(&self, s: usize, a: usize) -> &[f64] {
        self.base.kernel_row(s, a)
    }

    /// Probability that `(s, a)` leaves the subset in one step.
    pub fn exit_probability(&self, s: usize, a: usize) -> f64 {
        self.kernel_row(s, a)
            .iter()
            .enumerate()
            .filter(|(sp, _)| !self.interior[*sp])
            .map(|(_, &p)| p)
            .sum()
    }

    /// Fills `out` (base-space) with `values` on the interior and the terminal
    /// continuation elsewhere.
    pub fn scatter(&self, values: &[f64], terminal_value: f64, out: &mut [f64]) {
        out.fill(terminal_value);
        for &s in &self.subset {
            out[s] = values[s];
        }
    }
}

/// Exact values and constraint-costs per base state. Entries for states
/// outside the induced subset carry the terminal continuation.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub values: Vec<f64>,
    pub costs: Vec<f64>,
}

/// Exact policy evaluation on an induced CMDP.
///
/// Finite horizons run the T-step backward recursion; `Horizon::Infinite`
/// iterates to a `1e-10` residual. Rewards and costs use their means.
pub fn evaluate_policy(
    m: &InducedCmdp<'_>,
    policy: &TabularPolicy,
    horizon: Horizon,
) -> Result<Evaluation> {
    let base = m.base();
    if policy.num_states < base.num_states || policy.num_actions != base.num_actions {
        return Err(E4Error::ShapeMismatch {
            expected: format!("policy over {}x{}", base.num_states, base.num_actions),
            got: format!("{}x{}", policy.num_states, policy.num_actions),
        });
    }
    for &s in m.states() {
        let sum: f64 = policy.row(s).iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(E4Error::InvalidArgument(format!(
                "policy row for reachable state {s} is not a distribution"
            )));
        }
    }
    let gamma = m.gamma();
    let n = base.num_states;
    let mut v = vec![0.0; n];
    let mut c = vec![0.0; n];
    let mut v_next = vec![0.0; n];
    let mut c_next = vec![0.0; n];

    let (sweeps, residual_stop) = match horizon {
        Horizon::Steps(t) => (t, None),
        Horizon::Infinite => {
            let cap = 10 * epsilon_horizon(gamma, base.r_max.max(1e-12), base.c_max.max(1e-12), 1e-10)?;
            (cap.max(1), Some(1e-10))
        }
    };

    // Exterior entries hold the continuation of exiting: zero when no time
    // index remains to collect the terminal payout (the finite-horizon start),
    // the terminal value otherwise.
    if residual_stop.is_some() {
        for s in 0..n {
            if !m.is_interior(s) {
                v[s] = m.terminal_reward;
                c[s] = m.terminal_cost;
            }
        }
    }

    for _sweep in 0..sweeps {
        let mut delta: f64 = 0.0;
        for s in 0..n {
            if !m.is_interior(s) {
                v_next[s] = m.terminal_reward;
                c_next[s] = m.terminal_cost;
                continue;
            }
            let mut vs = 0.0;
            let mut cs = 0.0;
            for a in 0..base.num_actions {
                let p = policy.prob(s, a);
                if p == 0.0 {
                    continue;
                }
                let row = m.kernel_row(s, a);
                let mut ev = 0.0;
                let mut ec = 0.0;
                for (sp, &q) in row.iter().enumerate() {
                    if q > 0.0 {
                        ev += q * v[sp];
                        ec += q * c[sp];
                    }
                }
                vs += p * (m.reward(s, a) + gamma * ev);
                cs += p * (m.cost(s, a) + gamma * ec);
            }
            delta = delta.max((vs - v[s]).abs()).max((cs - c[s]).abs());
            v_next[s] = vs;
            c_next[s] = cs;
        }
        std::mem::swap(&mut v, &mut v_next);
        std::mem::swap(&mut c, &mut c_next);
        if let Some(tol) = residual_stop {
            if delta < tol {
                break;
            }
        }
    }
    // Report the continuation value on exterior entries.
    for s in 0..n {
        if !m.is_interior(s) {
            v[s] = m.terminal_reward;
            c[s] = m.terminal_cost;
        }
    }
    Ok(Evaluation { values: v, costs: c })
}

/// Largest entrywise deviation between two models of the same shape: the
/// smallest alpha for which one is an alpha-approximation of the other.
pub fn alpha_approximation_gap(m: &Cmdp, approx: &Cmdp) -> Result<f64> {
    if m.num_states != approx.num_states || m.num_actions != approx.num_actions {
        return Err(E4Error::ShapeMismatch {
            expected: format!("{}x{}", m.num_states, m.num_actions),
            got: format!("{}x{}", approx.num_states, approx.num_actions),
        });
    }
    let mut gap: f64 = 0.0;
    for (x, y) in m.kernel.iter().zip(&approx.kernel) {
        gap = gap.max((x - y).abs());
    }
    for (x, y) in m.rewards.iter().zip(&approx.rewards) {
        gap = gap.max((x - y).abs());
    }
    for (x, y) in m.costs.iter().zip(&approx.costs) {
        gap = gap.max((x - y).abs());
    }
    Ok(gap)
}

const HITTING_RESIDUAL: f64 = 1e-8;
const HITTING_SWEEP_CAP: usize = 200_000;

/// Minimal expected number of steps to reach `target` from every state under
/// the best deterministic policy. Unreachable states get `f64::INFINITY`.
pub fn expected_hitting_times(m: &Cmdp, target: usize) -> Vec<f64> {
    let n = m.num_states;
    // Max reach probability first: actions that leak to no-return states make
    // the expected time infinite, which plain value iteration detects slowly.
    let mut reach = vec![0.0; n];
    reach[target] = 1.0;
    loop {
        let mut delta: f64 = 0.0;
        for s in 0..n {
            if s == target {
                continue;
            }
            let mut best = 0.0_f64;
            for a in 0..m.num_actions {
                let p: f64 = m
                    .kernel_row(s, a)
                    .iter()
                    .enumerate()
                    .map(|(sp, &q)| q * reach[sp])
                    .sum();
                best = best.max(p);
            }
            delta = delta.max((best - reach[s]).abs());
            reach[s] = best;
        }
        if delta < 1e-12 {
            break;
        }
    }
    let mut h = vec![0.0; n];
    for s in 0..n {
        if s != target && reach[s] < 1.0 - 1e-9 {
            h[s] = f64::INFINITY;
        }
    }
    for _ in 0..HITTING_SWEEP_CAP {
        let mut delta: f64 = 0.0;
        for s in 0..n {
            if s == target || h[s].is_infinite() {
                continue;
            }
            let mut best = f64::INFINITY;
            for a in 0..m.num_actions {
                let mut exp = 1.0;
                let mut ok = true;
                for (sp, &q) in m.kernel_row(s, a).iter().enumerate() {
                    if q > 0.0 {
                        if h[sp].is_infinite() {
                            ok = false;
                            break;
                        }
                        exp += q * h[sp];
                    }
                }
                if ok {
                    best = best.min(exp);
                }
            }
            delta = delta.max((best - h[s]).abs());
            h[s] = best;
        }
        if delta < HITTING_RESIDUAL {
            break;
        }
    }
    h
}

/// Diameter: the maximum over ordered state pairs of the minimal expected
/// hitting time. Returns `f64::INFINITY` when some pair is unreachable.
pub fn diameter(m: &Cmdp) -> f64 {
    let n = m.num_states;
    let mut d: f64 = 0.0;
    for target in 0..n {
        let h = expected_hitting_times(m, target);
        for (s, &hs) in h.iter().enumerate() {
            if s != target {
                d = d.max(hs);
            }
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_absorbing(r: f64, c: f64, gamma: f64) -> Cmdp {
        Cmdp::new(1, 1, gamma, 3.0, 1.0, 1.0, vec![1.0], vec![r], vec![c]).unwrap()
    }

    #[test]
    fn epsilon_horizon_matches_formula() {
        assert_eq!(epsilon_horizon(0.9, 1.0, 1.0, 0.1).unwrap(), 47);
        // The formula gives ceil(2 ln 2) = 2; the tail bound holds there:
        // 0.5^2 * 1/(1-0.5) = 0.5 <= 1.
        assert_eq!(epsilon_horizon(0.5, 1.0, 1.0, 1.0).unwrap(), 2);
        // Immediate discounting collapses the horizon to the clamp.
        assert_eq!(epsilon_horizon(1e-9, 1.0, 1.0, 1.0).unwrap(), 1);
    }

    #[test]
    fn epsilon_horizon_tail_guarantee() {
        for &(gamma, eps) in &[(0.9, 0.1), (0.5, 1.0), (0.99, 0.25), (0.7, 0.03)] {
            let t = epsilon_horizon(gamma, 1.0, 1.0, eps).unwrap();
            let tail = gamma.powi(t as i32) / (1.0 - gamma);
            assert!(tail <= eps + 1e-12, "gamma={gamma} eps={eps} T={t} tail={tail}");
        }
    }

    #[test]
    fn epsilon_horizon_rejects_bad_arguments() {
        assert!(epsilon_horizon(1.0, 1.0, 1.0, 0.1).is_err());
        assert!(epsilon_horizon(0.9, 1.0, 1.0, 0.0).is_err());
        assert!(epsilon_horizon(0.9, 0.0, 0.0, 0.1).is_err());
    }

    #[test]
    fn absorbing_state_geometric_series() {
        let m = single_absorbing(1.0, 0.0, 0.5);
        let pi = TabularPolicy::uniform(1, 1);
        let ev = m.evaluate(&pi, Horizon::Infinite).unwrap();
        assert!((ev.values[0] - 2.0).abs() < 1e-9);
        assert!(ev.costs[0].abs() < 1e-12);
        let ev3 = m.evaluate(&pi, Horizon::Steps(3)).unwrap();
        assert!((ev3.values[0] - 1.75).abs() < 1e-12);
    }

    #[test]
    fn two_state_cycle_closed_form() {
        // Deterministic swap, rewards (1, 0).
        let kernel = vec![0.0, 1.0, 1.0, 0.0];
        let m = Cmdp::new(2, 1, 0.9, 3.0, 1.0, 1.0, kernel, vec![1.0, 0.0], vec![0.0, 0.0]).unwrap();
        let pi = TabularPolicy::uniform(2, 1);
        let ev = m.evaluate(&pi, Horizon::Infinite).unwrap();
        let expected = 1.0 / (1.0 - 0.81);
        assert!((ev.values[0] - expected).abs() < 1e-9, "{} vs {expected}", ev.values[0]);
        // Cross-check with a long truncation.
        let ev_t = m.evaluate(&pi, Horizon::Steps(10_000)).unwrap();
        assert!((ev_t.values[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn path_return_examples() {
        let mut tr = Trajectory::new(0);
        assert_eq!(path_return_and_cost(&tr, 0.9), (0.0, 0.0));
        tr.push(Step { state: 0, action: 0, reward: 0.0, cost: 1.0, next_state: 0 }).unwrap();
        tr.push(Step { state: 0, action: 0, reward: 0.0, cost: 1.0, next_state: 0 }).unwrap();
        let (_, c) = path_return_and_cost(&tr, 0.9);
        assert!((c - 1.9).abs() < 1e-12);

        let mut tr14 = Trajectory::new(0);
        for _ in 0..14 {
            tr14.push(Step { state: 0, action: 0, reward: 0.0, cost: 1.0, next_state: 0 }).unwrap();
        }
        let (_, c14) = path_return_and_cost(&tr14, 0.9);
        let expected = 10.0 * (1.0 - 0.9_f64.powi(14));
        assert!((c14 - expected).abs() < 1e-12);
    }

    #[test]
    fn trajectory_rejects_broken_chain() {
        let mut tr = Trajectory::new(0);
        tr.push(Step { state: 0, action: 0, reward: 0.0, cost: 0.0, next_state: 2 }).unwrap();
        let err = tr.push(Step { state: 1, action: 0, reward: 0.0, cost: 0.0, next_state: 2 });
        assert!(err.is_err());
    }

    #[test]
    fn induce_full_space_is_identity() {
        let kernel = vec![0.0, 1.0, 1.0, 0.0];
        let m = Cmdp::new(2, 1, 0.9, 3.0, 1.0, 1.0, kernel, vec![1.0, 0.0], vec![0.3, 0.1]).unwrap();
        let pi = TabularPolicy::uniform(2, 1);
        let full = m.evaluate(&pi, Horizon::Infinite).unwrap();
        let induced = induce(&m, &[0, 1], InducedVariant::Exploit, m.budget).unwrap();
        let ev = evaluate_policy(&induced, &pi, Horizon::Infinite).unwrap();
        assert!((ev.values[0] - full.values[0]).abs() < 1e-10);
        assert!((ev.costs[1] - full.costs[1]).abs() < 1e-10);
    }

    #[test]
    fn explore_variant_pays_terminal_reward_once() {
        // State 0 always exits the subset {0}; explore pays gamma * r_max.
        let kernel = vec![0.0, 1.0, 0.0, 1.0];
        let m = Cmdp::new(2, 1, 0.9, 3.0, 1.0, 1.0, kernel, vec![0.7, 0.0], vec![0.0, 0.0]).unwrap();
        let induced = induce(&m, &[0], InducedVariant::Explore, 1.0).unwrap();
        let pi = TabularPolicy::uniform(2, 1);
        let ev = evaluate_policy(&induced, &pi, Horizon::Infinite).unwrap();
        assert!((ev.values[0] - 0.9).abs() < 1e-10, "explore value {}", ev.values[0]);
        // One step to go: the arrival index falls outside the window.
        let ev1 = evaluate_policy(&induced, &pi, Horizon::Steps(1)).unwrap();
        assert!(ev1.values[0].abs() < 1e-12);
        let ev2 = evaluate_policy(&induced, &pi, Horizon::Steps(2)).unwrap();
        assert!((ev2.values[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn escape_variant_overrides_costs() {
        let kernel = vec![1.0, 0.0, 0.0, 1.0];
        let m = Cmdp::new(2, 1, 0.9, 3.0, 1.0, 1.0, kernel, vec![0.0, 0.0], vec![0.05, 0.0]).unwrap();
        let induced = induce(&m, &[0], InducedVariant::Escape, 1.5).unwrap();
        let pi = TabularPolicy::uniform(2, 1);
        // Self-loop at c_max forever: three steps cost c_max (1 + g + g^2).
        let ev = evaluate_policy(&induced, &pi, Horizon::Steps(3)).unwrap();
        let expected = 1.0 + 0.9 + 0.81;
        assert!((ev.costs[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn induce_rejects_empty_subset() {
        let m = single_absorbing(1.0, 0.0, 0.5);
        assert!(induce(&m, &[], InducedVariant::Exploit, 1.0).is_err());
    }

    #[test]
    fn alpha_gap_examples() {
        let m = single_absorbing(0.5, 0.2, 0.5);
        assert_eq!(alpha_approximation_gap(&m, &m).unwrap(), 0.0);
        let mut shifted = m.clone();
        shifted.rewards[0] += 0.01;
        let gap = alpha_approximation_gap(&m, &shifted).unwrap();
        assert!((gap - 0.01).abs() < 1e-15);
    }

    #[test]
    fn diameter_examples() {
        // Deterministic swap: every pair is one step apart.
        let kernel = vec![0.0, 1.0, 1.0, 0.0];
        let m = Cmdp::new(2, 1, 0.9, 3.0, 1.0, 1.0, kernel, vec![0.0; 2], vec![0.0; 2]).unwrap();
        assert!((diameter(&m) - 1.0).abs() < 1e-6);

        let single = single_absorbing(0.0, 0.0, 0.9);
        assert_eq!(diameter(&single), 0.0);

        // Unreachable pair: two absorbing states.
        let kernel = vec![1.0, 0.0, 0.0, 1.0];
        let m = Cmdp::new(2, 1, 0.9, 3.0, 1.0, 1.0, kernel, vec![0.0; 2], vec![0.0; 2]).unwrap();
        assert!(diameter(&m).is_infinite());
    }

    #[test]
    fn policy_softmax_consistency() {
        let pi = TabularPolicy::from_logits(2, 3, vec![0.0, 1.0, -1.0, 2.0, 2.0, 2.0]).unwrap();
        for s in 0..2 {
            let sum: f64 = pi.row(s).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        // Uniform row from equal logits.
        for a in 0..3 {
            assert!((pi.prob(1, a) - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cmdp_validation_catches_bad_rows() {
        let bad = Cmdp::new(1, 1, 0.9, 3.0, 1.0, 1.0, vec![0.9], vec![0.0], vec![0.0]);
        assert!(bad.is_err());
        let neg = Cmdp::new(1, 1, 0.9, 3.0, 1.0, 1.0, vec![-0.5], vec![0.0], vec![0.0]);
        assert!(neg.is_err());
        let tight_budget = Cmdp::new(1, 1, 0.9, 2.0, 1.0, 1.0, vec![1.0], vec![0.0], vec![1.0]);
        assert!(tight_budget.is_err());
    }
}

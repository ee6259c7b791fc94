//! Ambiguity sets over transition kernels and exact worst-case expectation
//! queries (the robust inner problem).
//!
//! The adversary maximises `P . v` over the set; robust cost backups call this
//! directly with cost-to-go vectors, and robust value backups call it with a
//! negated value vector to get the pessimistic side. All value vectors are
//! base-space (see [`crate::cmdp`]).

use rand::Rng;
use rand_distr::Distribution;

use crate::cmdp::{Cmdp, Step};
use crate::error::{E4Error, Result};

/// Which denominator the Hoeffding radius uses.
///
/// The source formulation divides by `1 - delta_psi`; the conventional
/// Hoeffding inversion divides by `delta_psi`. Both are exposed because the
/// discrepancy is documented rather than silently corrected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PsiConvention {
    #[default]
    Paper,
    Standard,
}

/// L1 radius from visitation counts: `sqrt((2/n) ln(S A 2^S / denom))`,
/// clamped to `[0, 2]`. Zero visits yield the vacuous full-simplex radius 2.
pub fn hoeffding_budget(
    n: usize,
    num_states: usize,
    num_actions: usize,
    delta_psi: f64,
    convention: PsiConvention,
) -> Result<f64> {
    if !(0.0..1.0).contains(&delta_psi) || delta_psi == 0.0 {
        return Err(E4Error::InvalidArgument(format!(
            "delta_psi must lie in (0,1), got {delta_psi}"
        )));
    }
    if n == 0 {
        return Ok(2.0);
    }
    let denom = match convention {
        PsiConvention::Paper => 1.0 - delta_psi,
        PsiConvention::Standard => delta_psi,
    };
    // ln(S A 2^S / denom) computed in log space so large S cannot overflow.
    let log_term = ((num_states * num_actions) as f64).ln() + num_states as f64 * 2f64.ln()
        - denom.ln();
    let psi = ((2.0 / n as f64) * log_term).sqrt();
    Ok(psi.clamp(0.0, 2.0))
}

/// Tightest L1 radius around the posterior mean covering `1 - delta_psi` of
/// the Dirichlet posterior, estimated from `n_samples` draws.
pub fn credible_budget<R: Rng + ?Sized>(
    counts: &[f64],
    delta_psi: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if n_samples < 1000 {
        return Err(E4Error::InvalidArgument(format!(
            "credible_budget needs at least 1000 samples, got {n_samples}"
        )));
    }
    if counts.iter().any(|&c| c <= 0.0) {
        return Err(E4Error::InvalidArgument(
            "Dirichlet pseudo-counts must be positive".into(),
        ));
    }
    let total: f64 = counts.iter().sum();
    let mean: Vec<f64> = counts.iter().map(|&c| c / total).collect();
    let mut distances = Vec::with_capacity(n_samples);
    if counts.len() == 1 {
        return Ok(0.0);
    }
    let dirichlet = rand_distr::Dirichlet::new(counts)
        .map_err(|e| E4Error::InvalidArgument(format!("bad Dirichlet parameters: {e}")))?;
    for _ in 0..n_samples {
        let draw = dirichlet.sample(rng);
        let d: f64 = draw.iter().zip(&mean).map(|(p, q)| (p - q).abs()).sum();
        distances.push(d);
    }
    distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((1.0 - delta_psi) * (n_samples as f64 - 1.0)).round() as usize;
    Ok(distances[idx.min(n_samples - 1)])
}

/// A deterministic next-state map plus the neighbourhood its error mass
/// spreads over. `next[s*A + a]` is the predicted (clamped) base state;
/// `off_grid` marks predictions that fell outside the state space before
/// clamping, which zeroes their likelihood weight.
#[derive(Clone, Debug)]
pub struct ActionModel {
    pub name: String,
    pub next: Vec<usize>,
    pub off_grid: Vec<bool>,
    /// Plausible outcomes per (s, a); always contains in-grid states only.
    pub neighborhoods: Vec<Vec<u32>>,
}

/// Activation implied by recent actions: after at least `min_count`
/// occurrences of `action` in the recent path, `activate` becomes plausible,
/// unless `unless_active` survived the likelihood filter.
#[derive(Clone, Debug)]
pub struct TransferRule {
    pub action: usize,
    pub min_count: usize,
    pub activate: usize,
    pub unless_active: Option<usize>,
}

/// Expert action-model set: kernels put mass `1 - tau` on the typical
/// outcome and `tau / N` on its neighbourhood, for `tau` up to `tau_max`.
#[derive(Clone, Debug)]
pub struct ModelSet {
    pub num_states: usize,
    pub num_actions: usize,
    pub models: Vec<ActionModel>,
    pub tau_max: f64,
    pub active: Vec<bool>,
    pub rules: Vec<TransferRule>,
}

impl ModelSet {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        models: Vec<ActionModel>,
        tau_max: f64,
        rules: Vec<TransferRule>,
    ) -> Result<Self> {
        if models.is_empty() {
            return Err(E4Error::InvalidArgument("model set needs at least one model".into()));
        }
        if !(0.0..=1.0).contains(&tau_max) {
            return Err(E4Error::InvalidArgument(format!("tau_max {tau_max} out of range")));
        }
        let pairs = num_states * num_actions;
        for m in &models {
            if m.next.len() != pairs || m.off_grid.len() != pairs || m.neighborhoods.len() != pairs {
                return Err(E4Error::ShapeMismatch {
                    expected: format!("{pairs} predictions per model"),
                    got: format!("{}", m.next.len()),
                });
            }
            if m.neighborhoods.iter().any(|n| n.is_empty()) {
                return Err(E4Error::InvalidArgument(format!(
                    "model {} has an empty neighbourhood",
                    m.name
                )));
            }
        }
        let active = vec![true; models.len()];
        Ok(ModelSet {
            num_states,
            num_actions,
            models,
            tau_max,
            active,
            rules,
        })
    }

    pub fn active_models(&self) -> impl Iterator<Item = (usize, &ActionModel)> {
        self.models
            .iter()
            .enumerate()
            .filter(|(i, _)| self.active[*i])
    }

    /// The valid kernel row of model `i` at error rate `tau` (clamped
    /// predictions, so all mass stays on the grid).
    pub fn kernel_row(&self, i: usize, tau: f64, s: usize, a: usize) -> Vec<f64> {
        let pair = s * self.num_actions + a;
        let model = &self.models[i];
        let mut row = vec![0.0; self.num_states];
        row[model.next[pair]] += 1.0 - tau;
        let nb = &model.neighborhoods[pair];
        let share = tau / nb.len() as f64;
        for &x in nb {
            row[x as usize] += share;
        }
        row
    }

    /// Transition probability used for path likelihoods: off-grid predictions
    /// keep their `1 - tau` mass off the map instead of clamping it.
    fn likelihood_step_prob(&self, i: usize, tau: f64, s: usize, a: usize, sp: usize) -> f64 {
        let pair = s * self.num_actions + a;
        let model = &self.models[i];
        let mut p = 0.0;
        if !model.off_grid[pair] && model.next[pair] == sp {
            p += 1.0 - tau;
        }
        let nb = &model.neighborhoods[pair];
        if nb.contains(&(sp as u32)) {
            p += tau / nb.len() as f64;
        }
        p
    }

    /// Path likelihood under model `i` at its most charitable error rate.
    pub fn path_likelihood(&self, i: usize, path: &[Step]) -> f64 {
        let mut lik = 1.0;
        for step in path {
            let p0 = self.likelihood_step_prob(i, 0.0, step.state, step.action, step.next_state);
            let pt = self.likelihood_step_prob(
                i,
                self.tau_max,
                step.state,
                step.action,
                step.next_state,
            );
            lik *= p0.max(pt);
            if lik == 0.0 {
                break;
            }
        }
        lik
    }
}

/// One of the supported ambiguity sets.
#[derive(Clone, Debug)]
pub enum UncertaintySet {
    /// Degenerate set holding exactly one kernel (non-robust solving).
    Singleton {
        num_states: usize,
        num_actions: usize,
        kernel: Vec<f64>,
    },
    /// `(s,a)`-rectangular L1 balls around a nominal kernel.
    L1 {
        num_states: usize,
        num_actions: usize,
        nominal: Vec<f64>,
        psi: Vec<f64>,
    },
    /// Bayesian credible region: L1 balls with radii from the Dirichlet
    /// posterior around its mean.
    Credible {
        num_states: usize,
        num_actions: usize,
        pseudo_counts: Vec<f64>,
        delta_psi: f64,
        nominal: Vec<f64>,
        psi: Vec<f64>,
    },
    Models(ModelSet),
}

impl UncertaintySet {
    pub fn singleton_from(m: &Cmdp) -> Self {
        UncertaintySet::Singleton {
            num_states: m.num_states,
            num_actions: m.num_actions,
            kernel: m.kernel().to_vec(),
        }
    }

    pub fn l1_from(m: &Cmdp, psi: Vec<f64>) -> Result<Self> {
        if psi.len() != m.num_states * m.num_actions {
            return Err(E4Error::ShapeMismatch {
                expected: format!("{} radii", m.num_states * m.num_actions),
                got: format!("{}", psi.len()),
            });
        }
        if psi.iter().any(|&x| x < 0.0) {
            return Err(E4Error::InvalidArgument("negative L1 radius".into()));
        }
        Ok(UncertaintySet::L1 {
            num_states: m.num_states,
            num_actions: m.num_actions,
            nominal: m.kernel().to_vec(),
            psi,
        })
    }

    /// Builds the credible region from per-(s,a,s') pseudo-counts.
    pub fn credible_from<R: Rng + ?Sized>(
        num_states: usize,
        num_actions: usize,
        pseudo_counts: Vec<f64>,
        delta_psi: f64,
        n_samples: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::credible_from_masked(num_states, num_actions, pseudo_counts, delta_psi, n_samples, None, rng)
    }

    /// As [`UncertaintySet::credible_from`], but only sampling radii for the
    /// masked pairs; the rest stay at zero (nominal-only). Keeps posterior
    /// sampling affordable when a solve touches a state subset.
    pub fn credible_from_masked<R: Rng + ?Sized>(
        num_states: usize,
        num_actions: usize,
        pseudo_counts: Vec<f64>,
        delta_psi: f64,
        n_samples: usize,
        mask: Option<&[bool]>,
        rng: &mut R,
    ) -> Result<Self> {
        let pairs = num_states * num_actions;
        if pseudo_counts.len() != pairs * num_states {
            return Err(E4Error::ShapeMismatch {
                expected: format!("{} pseudo-counts", pairs * num_states),
                got: format!("{}", pseudo_counts.len()),
            });
        }
        if let Some(m) = mask {
            if m.len() != pairs {
                return Err(E4Error::ShapeMismatch {
                    expected: format!("{pairs} mask entries"),
                    got: format!("{}", m.len()),
                });
            }
        }
        let mut nominal = vec![0.0; pairs * num_states];
        let mut psi = vec![0.0; pairs];
        for pair in 0..pairs {
            let counts = &pseudo_counts[pair * num_states..(pair + 1) * num_states];
            let total: f64 = counts.iter().sum();
            for (sp, &c) in counts.iter().enumerate() {
                nominal[pair * num_states + sp] = c / total;
            }
            if mask.map_or(true, |m| m[pair]) {
                psi[pair] = credible_budget(counts, delta_psi, n_samples, rng)?;
            }
        }
        Ok(UncertaintySet::Credible {
            num_states,
            num_actions,
            pseudo_counts,
            delta_psi,
            nominal,
            psi,
        })
    }

    pub fn num_states(&self) -> usize {
        match self {
            UncertaintySet::Singleton { num_states, .. }
            | UncertaintySet::L1 { num_states, .. }
            | UncertaintySet::Credible { num_states, .. } => *num_states,
            UncertaintySet::Models(ms) => ms.num_states,
        }
    }

    fn l1_parts(&self, s: usize, a: usize) -> Option<(&[f64], f64)> {
        match self {
            UncertaintySet::Singleton {
                num_states,
                num_actions,
                kernel,
            } => {
                let base = (s * num_actions + a) * num_states;
                Some((&kernel[base..base + num_states], 0.0))
            }
            UncertaintySet::L1 {
                num_states,
                num_actions,
                nominal,
                psi,
            }
            | UncertaintySet::Credible {
                num_states,
                num_actions,
                nominal,
                psi,
                ..
            } => {
                let base = (s * num_actions + a) * num_states;
                Some((&nominal[base..base + num_states], psi[s * num_actions + a]))
            }
            UncertaintySet::Models(_) => None,
        }
    }

    /// Exact maximum of `P . v` over the set, without materialising the
    /// maximiser. `order` may carry state indices sorted by decreasing `v`
    /// (with index as tiebreak), letting sweeps share one argsort.
    pub fn worst_value(&self, s: usize, a: usize, v: &[f64], order: Option<&[usize]>) -> f64 {
        match self {
            UncertaintySet::Singleton { .. } => {
                let (row, _) = self.l1_parts(s, a).unwrap();
                dot_sparse(row, v)
            }
            UncertaintySet::L1 { .. } | UncertaintySet::Credible { .. } => {
                let (nominal, psi) = self.l1_parts(s, a).unwrap();
                let owned;
                let ord = match order {
                    Some(o) => o,
                    None => {
                        owned = sort_desc(v);
                        &owned
                    }
                };
                l1_worst_value(nominal, psi, v, ord)
            }
            UncertaintySet::Models(ms) => {
                let mut best = f64::NEG_INFINITY;
                for (i, _) in ms.active_models() {
                    for tau in [0.0, ms.tau_max] {
                        best = best.max(model_expectation(ms, i, tau, s, a, v));
                    }
                }
                best
            }
        }
    }

    /// Exact maximiser of `P . v`: the worst-case value and the kernel row
    /// attaining it.
    pub fn worst_case_expectation(&self, s: usize, a: usize, v: &[f64]) -> (f64, Vec<f64>) {
        match self {
            UncertaintySet::Singleton { .. } => {
                let (row, _) = self.l1_parts(s, a).unwrap();
                (dot_sparse(row, v), row.to_vec())
            }
            UncertaintySet::L1 { .. } | UncertaintySet::Credible { .. } => {
                let (nominal, psi) = self.l1_parts(s, a).unwrap();
                let ord = sort_desc(v);
                l1_worst_kernel(nominal, psi, v, &ord)
            }
            UncertaintySet::Models(ms) => {
                let mut best = f64::NEG_INFINITY;
                let mut arg = (0usize, 0.0f64);
                for (i, _) in ms.active_models() {
                    for tau in [0.0, ms.tau_max] {
                        let val = model_expectation(ms, i, tau, s, a, v);
                        if val > best {
                            best = val;
                            arg = (i, tau);
                        }
                    }
                }
                (best, ms.kernel_row(arg.0, arg.1, s, a))
            }
        }
    }
}

fn dot_sparse(row: &[f64], v: &[f64]) -> f64 {
    row.iter()
        .zip(v)
        .filter(|(&p, _)| p != 0.0)
        .map(|(&p, &x)| p * x)
        .sum()
}

fn model_expectation(ms: &ModelSet, i: usize, tau: f64, s: usize, a: usize, v: &[f64]) -> f64 {
    let pair = s * ms.num_actions + a;
    let model = &ms.models[i];
    let nb = &model.neighborhoods[pair];
    let nb_mean = nb.iter().map(|&x| v[x as usize]).sum::<f64>() / nb.len() as f64;
    (1.0 - tau) * v[model.next[pair]] + tau * nb_mean
}

/// State indices sorted by decreasing value, index ascending on ties.
pub fn sort_desc(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap().then(a.cmp(&b)));
    idx
}

/// Closed-form L1 inner maximum: move up to `psi/2` mass from the lowest-`v`
/// support onto the highest-`v` state.
fn l1_worst_value(nominal: &[f64], psi: f64, v: &[f64], order_desc: &[usize]) -> f64 {
    let top = order_desc[0];
    let movable = (psi / 2.0).min(1.0 - nominal[top]);
    let mut val = dot_sparse(nominal, v) + movable * v[top];
    let mut remaining = movable;
    for &i in order_desc.iter().rev() {
        if remaining <= 0.0 {
            break;
        }
        if i == top {
            continue;
        }
        let take = nominal[i].min(remaining);
        if take > 0.0 {
            val -= take * v[i];
            remaining -= take;
        }
    }
    val
}

fn l1_worst_kernel(nominal: &[f64], psi: f64, v: &[f64], order_desc: &[usize]) -> (f64, Vec<f64>) {
    let mut row = nominal.to_vec();
    let top = order_desc[0];
    let movable = (psi / 2.0).min(1.0 - row[top]);
    row[top] += movable;
    let mut remaining = movable;
    for &i in order_desc.iter().rev() {
        if remaining <= 0.0 {
            break;
        }
        if i == top {
            continue;
        }
        let take = nominal[i].min(remaining);
        if take > 0.0 {
            row[i] -= take;
            remaining -= take;
        }
    }
    (dot_sparse(&row, v), row)
}

/// Deactivates models implausible on the recent path, then applies the
/// transfer rules to reactivate implied ones. The threshold is relative to
/// the most likely model, so noise that penalises every model equally does
/// not wipe the set. Never returns an empty active set.
pub fn filter_models(set: &ModelSet, recent_path: &[Step], threshold: f64) -> ModelSet {
    let mut out = set.clone();
    if recent_path.is_empty() {
        return out;
    }
    let liks: Vec<f64> = (0..set.models.len())
        .map(|i| set.path_likelihood(i, recent_path))
        .collect();
    let max_lik = liks.iter().cloned().fold(0.0, f64::max);
    let mut active: Vec<bool> = liks.iter().map(|&l| l >= threshold * max_lik && l > 0.0).collect();

    for rule in &set.rules {
        let count = recent_path.iter().filter(|s| s.action == rule.action).count();
        if count < rule.min_count {
            continue;
        }
        if let Some(blocker) = rule.unless_active {
            if active[blocker] {
                continue;
            }
        }
        active[rule.activate] = true;
    }

    if !active.iter().any(|&x| x) {
        let best = liks
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        active[best] = true;
    }
    out.active = active;
    out
}

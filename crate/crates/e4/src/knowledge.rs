//! Visitation counts, the empirical model, and the known/unknown partition.

use crate::cmdp::{Cmdp, NoiseSpec};
use crate::error::{E4Error, Result};

/// Shape and bounds needed to assemble an empirical model without access to
/// the hidden environment.
#[derive(Clone, Copy, Debug)]
pub struct ModelShape {
    pub num_states: usize,
    pub num_actions: usize,
    pub r_max: f64,
    pub c_max: f64,
}

/// Per-(s,a) visit counts, accumulated samples, and transition counts.
///
/// Single-writer: one driver thread records; clones serve as read-only
/// snapshots.
#[derive(Clone, Debug)]
pub struct KnowledgeBase {
    pub num_states: usize,
    pub num_actions: usize,
    pub m_known: u32,
    n: Vec<u32>,
    sum_r: Vec<f64>,
    sum_c: Vec<f64>,
    trans: Vec<u32>,
}

impl KnowledgeBase {
    pub fn new(num_states: usize, num_actions: usize, m_known: u32) -> Self {
        let pairs = num_states * num_actions;
        KnowledgeBase {
            num_states,
            num_actions,
            m_known,
            n: vec![0; pairs],
            sum_r: vec![0.0; pairs],
            sum_c: vec![0.0; pairs],
            trans: vec![0; pairs * num_states],
        }
    }

    #[inline]
    fn pair(&self, s: usize, a: usize) -> usize {
        s * self.num_actions + a
    }

    /// Rebuilds a base from checkpointed counts, enforcing that per-pair
    /// transition counts tie out with visit counts.
    pub fn from_parts(
        num_states: usize,
        num_actions: usize,
        m_known: u32,
        visits: Vec<u64>,
        sum_r: Vec<f64>,
        sum_c: Vec<f64>,
        trans: Vec<u64>,
    ) -> Result<Self> {
        let pairs = num_states * num_actions;
        if visits.len() != pairs
            || sum_r.len() != pairs
            || sum_c.len() != pairs
            || trans.len() != pairs * num_states
        {
            return Err(E4Error::ShapeMismatch {
                expected: format!("{pairs} pairs"),
                got: format!(
                    "{}/{}/{}/{}",
                    visits.len(),
                    sum_r.len(),
                    sum_c.len(),
                    trans.len()
                ),
            });
        }
        for p in 0..pairs {
            let total: u64 = trans[p * num_states..(p + 1) * num_states].iter().sum();
            if total != visits[p] {
                return Err(E4Error::InvalidArgument(format!(
                    "pair {p}: transition counts sum to {total} but visits are {}",
                    visits[p]
                )));
            }
        }
        Ok(KnowledgeBase {
            num_states,
            num_actions,
            m_known,
            n: visits.into_iter().map(|x| x as u32).collect(),
            sum_r,
            sum_c,
            trans: trans.into_iter().map(|x| x as u32).collect(),
        })
    }

    pub fn record(&mut self, s: usize, a: usize, r: f64, c: f64, next: usize) -> Result<()> {
        if s >= self.num_states || a >= self.num_actions || next >= self.num_states {
            return Err(E4Error::InvalidArgument(format!(
                "record out of range: (s={s}, a={a}, s'={next})"
            )));
        }
        let p = self.pair(s, a);
        self.n[p] += 1;
        self.sum_r[p] += r;
        self.sum_c[p] += c;
        self.trans[p * self.num_states + next] += 1;
        Ok(())
    }

    #[inline]
    pub fn count(&self, s: usize, a: usize) -> u32 {
        self.n[self.pair(s, a)]
    }

    pub fn counts_row(&self, s: usize) -> &[u32] {
        &self.n[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn transition_count(&self, s: usize, a: usize, next: usize) -> u32 {
        self.trans[self.pair(s, a) * self.num_states + next]
    }

    pub fn transition_counts(&self, s: usize, a: usize) -> &[u32] {
        let p = self.pair(s, a);
        &self.trans[p * self.num_states..(p + 1) * self.num_states]
    }

    pub fn sum_reward(&self, s: usize, a: usize) -> f64 {
        self.sum_r[self.pair(s, a)]
    }

    pub fn sum_cost(&self, s: usize, a: usize) -> f64 {
        self.sum_c[self.pair(s, a)]
    }

    /// A state is known once every action has at least `m_known` visits.
    pub fn is_known(&self, s: usize) -> bool {
        self.counts_row(s).iter().all(|&n| n >= self.m_known)
    }

    /// The known/unknown partition, both sorted.
    pub fn known_partition(&self) -> (Vec<usize>, Vec<usize>) {
        let mut known = Vec::new();
        let mut unknown = Vec::new();
        for s in 0..self.num_states {
            if self.is_known(s) {
                known.push(s);
            } else {
                unknown.push(s);
            }
        }
        (known, unknown)
    }

    /// The empirical model: sample-mean kernel rows and rewards where data
    /// exists. Unvisited pairs fall back to a self-loop (never inventing
    /// reachability), zero reward, and the pessimistic cost `c_max`.
    pub fn estimate_model(&self, shape: ModelShape, gamma: f64, budget: f64) -> Result<Cmdp> {
        if shape.num_states != self.num_states || shape.num_actions != self.num_actions {
            return Err(E4Error::ShapeMismatch {
                expected: format!("{}x{}", self.num_states, self.num_actions),
                got: format!("{}x{}", shape.num_states, shape.num_actions),
            });
        }
        let (s_count, a_count) = (self.num_states, self.num_actions);
        let mut kernel = vec![0.0; s_count * a_count * s_count];
        let mut rewards = vec![0.0; s_count * a_count];
        let mut costs = vec![0.0; s_count * a_count];
        for s in 0..s_count {
            for a in 0..a_count {
                let p = self.pair(s, a);
                let row = &mut kernel[p * s_count..(p + 1) * s_count];
                let n = self.n[p];
                if n == 0 {
                    row[s] = 1.0;
                    rewards[p] = 0.0;
                    costs[p] = shape.c_max;
                } else {
                    for (sp, &cnt) in self.trans[p * s_count..(p + 1) * s_count].iter().enumerate()
                    {
                        row[sp] = cnt as f64 / n as f64;
                    }
                    let sum: f64 = row.iter().sum();
                    for q in row.iter_mut() {
                        *q /= sum;
                    }
                    rewards[p] = (self.sum_r[p] / n as f64).clamp(0.0, shape.r_max);
                    costs[p] = (self.sum_c[p] / n as f64).clamp(0.0, shape.c_max);
                }
            }
        }
        let pairs = s_count * a_count;
        Cmdp::new(
            s_count,
            a_count,
            gamma,
            budget,
            shape.r_max,
            shape.c_max,
            kernel,
            rewards,
            costs,
        )
        .map(|m| {
            m.with_noise(NoiseSpec::deterministic(pairs), NoiseSpec::deterministic(pairs))
                .expect("shape checked above")
        })
    }
}

/// The sample-count bound making a state's statistics trustworthy:
/// `ceil(kappa (S T G / eps)^4 V ln(1/delta))`.
#[allow(clippy::too_many_arguments)]
pub fn m_known_bound(
    num_states: usize,
    horizon: usize,
    g_bound: f64,
    eps: f64,
    var_bound: f64,
    delta: f64,
    kappa: f64,
) -> Result<u64> {
    if !(0.0..1.0).contains(&delta) || delta == 0.0 {
        return Err(E4Error::InvalidArgument(format!("delta must lie in (0,1), got {delta}")));
    }
    if eps <= 0.0 || g_bound <= 0.0 || var_bound <= 0.0 || kappa <= 0.0 {
        return Err(E4Error::InvalidArgument("all bound inputs must be positive".into()));
    }
    let ratio = (num_states as f64) * (horizon as f64) * g_bound / eps;
    let m = kappa * ratio.powi(4) * var_bound * (1.0 / delta).ln();
    Ok(m.ceil() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::alpha_approximation_gap;
    use crate::env::random_cmdp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn record_updates_all_counts() {
        let mut kb = KnowledgeBase::new(3, 2, 1);
        kb.record(0, 1, 0.5, 0.0, 2).unwrap();
        assert_eq!(kb.count(0, 1), 1);
        assert_eq!(kb.transition_count(0, 1, 2), 1);
        assert_eq!(kb.sum_reward(0, 1), 0.5);
        kb.record(0, 1, 0.5, 0.0, 2).unwrap();
        assert_eq!(kb.count(0, 1), 2);
        assert_eq!(kb.transition_count(0, 1, 2), 2);
        assert!(kb.record(3, 0, 0.0, 0.0, 0).is_err());
    }

    #[test]
    fn transition_counts_tie_out_with_visits() {
        let mut kb = KnowledgeBase::new(4, 2, 1);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..500 {
            let s = rng.gen_range(0..4);
            let a = rng.gen_range(0..2);
            let next = rng.gen_range(0..4);
            kb.record(s, a, 0.0, 0.0, next).unwrap();
        }
        for s in 0..4 {
            for a in 0..2 {
                let total: u32 = kb.transition_counts(s, a).iter().sum();
                assert_eq!(total, kb.count(s, a));
            }
        }
    }

    #[test]
    fn empirical_frequencies_converge() {
        // Law of large numbers against a fixed kernel row.
        let row = [0.5, 0.3, 0.2];
        let mut kb = KnowledgeBase::new(3, 1, 1);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let n = 10_000;
        for _ in 0..n {
            let u: f64 = rng.gen();
            let next = if u < 0.5 { 0 } else if u < 0.8 { 1 } else { 2 };
            kb.record(0, 0, 0.0, 0.0, next).unwrap();
        }
        for (sp, &p) in row.iter().enumerate() {
            let freq = kb.transition_count(0, 0, sp) as f64 / n as f64;
            assert!((freq - p).abs() < 0.02, "state {sp}: {freq} vs {p}");
        }
    }

    #[test]
    fn m_known_bound_examples() {
        // All factors unity: delta = e^-1 makes ln(1/delta) = 1.
        assert_eq!(m_known_bound(1, 1, 1.0, 1.0, 1.0, 1.0 / std::f64::consts::E, 1.0).unwrap(), 1);
        // Quartic dependence on eps: doubling eps divides by 16 before ceiling.
        let base = m_known_bound(2, 3, 10.0, 1.0, 1.0, 0.1, 1.0).unwrap();
        let halved = m_known_bound(2, 3, 10.0, 2.0, 1.0, 0.1, 1.0).unwrap();
        assert_eq!(base, 29_841_503, "direct arithmetic: ceil(60^4 ln 10)");
        assert_eq!(halved, (60.0_f64.powi(4) / 16.0 * 10.0_f64.ln()).ceil() as u64);
        assert!(m_known_bound(2, 3, 10.0, 1.0, 1.0, 1.5, 1.0).is_err());
    }

    #[test]
    fn known_partition_examples() {
        let mut kb = KnowledgeBase::new(3, 2, 1);
        assert_eq!(kb.known_partition().0, Vec::<usize>::new());
        // One state with all actions at the threshold.
        kb.record(1, 0, 0.0, 0.0, 1).unwrap();
        kb.record(1, 1, 0.0, 0.0, 1).unwrap();
        let (known, unknown) = kb.known_partition();
        assert_eq!(known, vec![1]);
        assert_eq!(unknown, vec![0, 2]);
        // A lagging action keeps a state unknown: min over actions governs.
        let mut kb2 = KnowledgeBase::new(1, 2, 2);
        kb2.record(0, 0, 0.0, 0.0, 0).unwrap();
        kb2.record(0, 0, 0.0, 0.0, 0).unwrap();
        kb2.record(0, 1, 0.0, 0.0, 0).unwrap();
        assert!(!kb2.is_known(0));
    }

    #[test]
    fn known_set_is_monotone_under_records() {
        let mut kb = KnowledgeBase::new(4, 2, 2);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut prev_known = 0;
        for _ in 0..300 {
            let s = rng.gen_range(0..4);
            let a = rng.gen_range(0..2);
            kb.record(s, a, 0.0, 0.0, rng.gen_range(0..4)).unwrap();
            let known = kb.known_partition().0.len();
            assert!(known >= prev_known);
            prev_known = known;
        }
    }

    #[test]
    fn estimate_model_examples() {
        let mut kb = KnowledgeBase::new(3, 1, 1);
        // Four visits with transitions (2, 1, 1).
        kb.record(0, 0, 0.2, 0.1, 0).unwrap();
        kb.record(0, 0, 0.2, 0.1, 0).unwrap();
        kb.record(0, 0, 0.2, 0.1, 1).unwrap();
        kb.record(0, 0, 0.2, 0.1, 2).unwrap();
        let shape = ModelShape { num_states: 3, num_actions: 1, r_max: 1.0, c_max: 1.0 };
        let m = kb.estimate_model(shape, 0.9, 3.0).unwrap();
        assert_eq!(m.kernel_row(0, 0), &[0.5, 0.25, 0.25]);
        // Unvisited pairs: self-loop, zero reward, pessimistic cost.
        assert_eq!(m.kernel_row(1, 0), &[0.0, 1.0, 0.0]);
        assert_eq!(m.reward(1, 0), 0.0);
        assert_eq!(m.cost(1, 0), 1.0);
        // Deterministic given counts.
        let m2 = kb.estimate_model(shape, 0.9, 3.0).unwrap();
        assert_eq!(m.kernel(), m2.kernel());
    }

    #[test]
    fn estimated_model_approaches_truth() {
        // Hoeffding-rate Monte Carlo oracle on a random 5-state CMDP.
        let truth = random_cmdp(5, 2, 0.9, 3.0, 1.0, 21).unwrap();
        let mut kb = KnowledgeBase::new(5, 2, 1);
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        for s in 0..5 {
            for a in 0..2 {
                let row = truth.kernel_row(s, a).to_vec();
                for _ in 0..100_000 {
                    let next = crate::cmdp::sample_index(&row, &mut rng);
                    kb.record(s, a, truth.reward(s, a), truth.cost(s, a), next).unwrap();
                }
            }
        }
        let shape = ModelShape { num_states: 5, num_actions: 2, r_max: 1.0, c_max: 1.0 };
        let est = kb.estimate_model(shape, 0.9, 3.0).unwrap();
        let gap = alpha_approximation_gap(&truth, &est).unwrap();
        assert!(gap <= 0.02, "gap {gap}");
    }
}

//! Concrete CMDP instances: the gridworld testbed, a random-CMDP generator
//! for test suites, and the sample-only environment wrapper.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::cmdp::{sample_index, Cmdp};
use crate::error::{E4Error, Result};
use crate::uncertainty::{ActionModel, ModelSet, TransferRule};

/// Gridworld actions, in tabulated order.
pub const NORTH: usize = 0;
pub const WEST: usize = 1;
pub const SOUTH: usize = 2;
pub const EAST: usize = 3;
pub const STAY: usize = 4;
pub const GRID_ACTIONS: usize = 5;

const ACTION_OFFSETS: [(i64, i64); GRID_ACTIONS] = [(0, 1), (-1, 0), (0, -1), (1, 0), (0, 0)];

/// A rectangular gridworld with Von Neumann moves, slip noise, and wall-bump
/// constraint-costs. Reward 1 is paid for progress along the boundary cycle,
/// so the optimal constrained policy circles the walls without hitting them.
#[derive(Clone, Debug, PartialEq)]
pub struct GridworldSpec {
    pub width: usize,
    pub height: usize,
    /// Probability that an action's outcome is drawn uniformly from the five
    /// action outcomes instead of the intended one.
    pub slip: f64,
    pub wall_cost: f64,
    pub budget: f64,
    pub gamma: f64,
}

impl Default for GridworldSpec {
    fn default() -> Self {
        GridworldSpec {
            width: 10,
            height: 10,
            slip: 0.05,
            wall_cost: 1.0,
            budget: 10.0,
            gamma: 0.99,
        }
    }
}

impl GridworldSpec {
    pub fn num_states(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn state_id(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn coords(&self, s: usize) -> (usize, usize) {
        (s % self.width, s / self.width)
    }

    /// Applies an action offset with wall bumps: out-of-bounds moves stay in
    /// place and flag the bump.
    pub fn outcome(&self, s: usize, a: usize) -> (usize, bool) {
        let (x, y) = self.coords(s);
        let (dx, dy) = ACTION_OFFSETS[a];
        let nx = x as i64 + dx;
        let ny = y as i64 + dy;
        if nx < 0 || ny < 0 || nx >= self.width as i64 || ny >= self.height as i64 {
            (s, true)
        } else {
            (self.state_id(nx as usize, ny as usize), false)
        }
    }

    fn on_boundary(&self, s: usize) -> bool {
        let (x, y) = self.coords(s);
        x == 0 || y == 0 || x == self.width - 1 || y == self.height - 1
    }

    /// The action continuing the boundary cycle from a boundary cell.
    pub fn progress_action(&self, s: usize) -> Option<usize> {
        let (x, y) = self.coords(s);
        let (w, h) = (self.width, self.height);
        if y == 0 && x < w - 1 {
            Some(EAST)
        } else if x == w - 1 && y < h - 1 {
            Some(NORTH)
        } else if y == h - 1 && x > 0 {
            Some(WEST)
        } else if x == 0 && y > 0 {
            Some(SOUTH)
        } else {
            None
        }
    }

    /// The initial known strip: the south wall except its east corner.
    pub fn initial_known(&self) -> Vec<usize> {
        (0..self.width - 1).map(|x| self.state_id(x, 0)).collect()
    }
}

/// Builds the gridworld CMDP. Kernel rows carry the slip mixture, cost means
/// are expected bump costs, rewards mark boundary progress.
pub fn build_gridworld(spec: &GridworldSpec) -> Result<Cmdp> {
    if spec.width < 2 || spec.height < 2 {
        return Err(E4Error::InvalidArgument("gridworld needs width, height >= 2".into()));
    }
    if !(0.0..1.0).contains(&spec.slip) {
        return Err(E4Error::InvalidArgument(format!("slip {} out of [0,1)", spec.slip)));
    }
    let n = spec.num_states();
    let a_count = GRID_ACTIONS;
    let mut kernel = vec![0.0; n * a_count * n];
    let mut rewards = vec![0.0; n * a_count];
    let mut costs = vec![0.0; n * a_count];
    for s in 0..n {
        let outcomes: Vec<(usize, bool)> = (0..a_count).map(|a| spec.outcome(s, a)).collect();
        for a in 0..a_count {
            let row = &mut kernel[(s * a_count + a) * n..(s * a_count + a + 1) * n];
            let (intended, bumped) = outcomes[a];
            row[intended] += 1.0 - spec.slip;
            let mut cost = if bumped { (1.0 - spec.slip) * spec.wall_cost } else { 0.0 };
            for &(cell, slip_bump) in &outcomes {
                row[cell] += spec.slip / a_count as f64;
                if slip_bump {
                    cost += spec.slip / a_count as f64 * spec.wall_cost;
                }
            }
            costs[s * a_count + a] = cost;
            if spec.on_boundary(s) && spec.progress_action(s) == Some(a) {
                rewards[s * a_count + a] = 1.0;
            }
        }
    }
    Cmdp::new(
        n,
        a_count,
        spec.gamma,
        spec.budget,
        1.0,
        spec.wall_cost,
        kernel,
        rewards,
        costs,
    )
}

/// Expert action-model ids for the gridworld set.
pub mod expert {
    pub const INTERIOR: usize = 0;
    pub const NORTH_BOUND: usize = 1;
    pub const WEST_BOUND: usize = 2;
    pub const SOUTH_BOUND: usize = 3;
    pub const EAST_BOUND: usize = 4;
}

/// Builds the gridworld expert model set: an interior model that applies
/// coordinate offsets verbatim, and one model per wall making the
/// corresponding action a null move. Neighbourhoods are in-grid L2 balls of
/// the given radius around the predicted cell; error rates range up to
/// `tau_max`. Transfer rules reactivate a wall model after `rule_min_count`
/// moves toward it, unless the opposite wall is still plausible.
pub fn expert_model_set(
    spec: &GridworldSpec,
    tau_max: f64,
    neighborhood_radius: f64,
    rule_min_count: usize,
) -> Result<ModelSet> {
    let n = spec.num_states();
    let a_count = GRID_ACTIONS;
    let names = ["interior", "north_bound", "west_bound", "south_bound", "east_bound"];
    // Which action each wall model nullifies; the interior model nullifies none.
    let null_action = [None, Some(NORTH), Some(WEST), Some(SOUTH), Some(EAST)];

    let mut models = Vec::with_capacity(names.len());
    for (name, null) in names.iter().zip(null_action) {
        let mut next = vec![0usize; n * a_count];
        let mut off_grid = vec![false; n * a_count];
        let mut neighborhoods = vec![Vec::new(); n * a_count];
        for s in 0..n {
            let (x, y) = spec.coords(s);
            for a in 0..a_count {
                let pair = s * a_count + a;
                let (tx, ty) = if Some(a) == null || a == STAY {
                    (x as i64, y as i64)
                } else {
                    let (dx, dy) = ACTION_OFFSETS[a];
                    (x as i64 + dx, y as i64 + dy)
                };
                let outside =
                    tx < 0 || ty < 0 || tx >= spec.width as i64 || ty >= spec.height as i64;
                let cx = tx.clamp(0, spec.width as i64 - 1) as usize;
                let cy = ty.clamp(0, spec.height as i64 - 1) as usize;
                next[pair] = spec.state_id(cx, cy);
                off_grid[pair] = outside;
                let mut nb = Vec::new();
                let r2 = neighborhood_radius * neighborhood_radius;
                for ny in 0..spec.height {
                    for nx in 0..spec.width {
                        let ddx = nx as f64 - cx as f64;
                        let ddy = ny as f64 - cy as f64;
                        if ddx * ddx + ddy * ddy <= r2 + 1e-12 {
                            nb.push(spec.state_id(nx, ny) as u32);
                        }
                    }
                }
                neighborhoods[pair] = nb;
            }
        }
        models.push(ActionModel {
            name: (*name).to_string(),
            next,
            off_grid,
            neighborhoods,
        });
    }

    let rules = vec![
        TransferRule {
            action: EAST,
            min_count: rule_min_count,
            activate: expert::EAST_BOUND,
            unless_active: Some(expert::WEST_BOUND),
        },
        TransferRule {
            action: WEST,
            min_count: rule_min_count,
            activate: expert::WEST_BOUND,
            unless_active: Some(expert::EAST_BOUND),
        },
        TransferRule {
            action: NORTH,
            min_count: rule_min_count,
            activate: expert::NORTH_BOUND,
            unless_active: Some(expert::SOUTH_BOUND),
        },
        TransferRule {
            action: SOUTH,
            min_count: rule_min_count,
            activate: expert::SOUTH_BOUND,
            unless_active: Some(expert::NORTH_BOUND),
        },
    ];
    ModelSet::new(n, a_count, models, tau_max, rules)
}

/// Dirichlet-sampled CMDP over a random support, with uniform rewards and
/// costs in `[0, 1]`. Deterministic under the seed.
pub fn random_cmdp(
    num_states: usize,
    num_actions: usize,
    gamma: f64,
    budget: f64,
    density: f64,
    seed: u64,
) -> Result<Cmdp> {
    if num_states == 0 || num_actions == 0 {
        return Err(E4Error::InvalidArgument("empty state or action space".into()));
    }
    if !(0.0 < density && density <= 1.0) {
        return Err(E4Error::InvalidArgument(format!("density {density} out of (0,1]")));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let support_size = ((density * num_states as f64).ceil() as usize).clamp(1, num_states);
    let mut kernel = vec![0.0; num_states * num_actions * num_states];
    let mut rewards = vec![0.0; num_states * num_actions];
    let mut costs = vec![0.0; num_states * num_actions];
    let mut indices: Vec<usize> = (0..num_states).collect();
    for s in 0..num_states {
        for a in 0..num_actions {
            // Partial Fisher-Yates for the support.
            for i in 0..support_size {
                let j = rng.gen_range(i..num_states);
                indices.swap(i, j);
            }
            let row = &mut kernel[(s * num_actions + a) * num_states..][..num_states];
            if support_size == 1 {
                row[indices[0]] = 1.0;
            } else {
                // Dirichlet(1, ..., 1) via normalised exponentials.
                let mut total = 0.0;
                let mut draws = Vec::with_capacity(support_size);
                for _ in 0..support_size {
                    let e = -(1.0 - rng.gen::<f64>()).ln();
                    draws.push(e);
                    total += e;
                }
                for (i, &e) in draws.iter().enumerate() {
                    row[indices[i]] = e / total;
                }
                // Exact renormalisation to the row-sum tolerance.
                let sum: f64 = row.iter().sum();
                for p in row.iter_mut() {
                    *p /= sum;
                }
            }
            rewards[s * num_actions + a] = rng.gen::<f64>();
            costs[s * num_actions + a] = rng.gen::<f64>();
        }
    }
    Cmdp::new(num_states, num_actions, gamma, budget, 1.0, 1.0, kernel, rewards, costs)
}

/// The unknown-environment contract: the driver only ever samples
/// transitions. The true model is reachable through [`SampleEnv::oracle_model`]
/// for tests and oracle-supplied uncertainty sets only.
#[derive(Clone, Debug)]
pub struct SampleEnv {
    model: Cmdp,
    rng: ChaCha12Rng,
    state: usize,
}

impl SampleEnv {
    pub fn new(model: Cmdp, seed: u64, start: usize) -> Result<Self> {
        if start >= model.num_states {
            return Err(E4Error::InvalidArgument(format!("start state {start} out of range")));
        }
        Ok(SampleEnv {
            model,
            rng: ChaCha12Rng::seed_from_u64(seed),
            state: start,
        })
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn num_states(&self) -> usize {
        self.model.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.model.num_actions
    }

    /// Samples one interaction from the current state. The caller's view of
    /// the state must match; anything else is a driver bug.
    pub fn sample(&mut self, s: usize, a: usize) -> Result<(f64, f64, usize)> {
        if s != self.state {
            return Err(E4Error::InvalidArgument(format!(
                "sample called for state {s} but the environment is at {}",
                self.state
            )));
        }
        if a >= self.model.num_actions {
            return Err(E4Error::InvalidArgument(format!("action {a} out of range")));
        }
        let next = sample_index(self.model.kernel_row(s, a), &mut self.rng);
        let pair = s * self.model.num_actions + a;
        let r = self
            .model
            .reward_noise
            .sample(pair, self.model.reward(s, a), 0.0, self.model.r_max, &mut self.rng);
        let c = self
            .model
            .cost_noise
            .sample(pair, self.model.cost(s, a), 0.0, self.model.c_max, &mut self.rng);
        self.state = next;
        Ok((r, c, next))
    }

    /// Test gate: teleports the environment.
    pub fn reset_to(&mut self, s: usize) -> Result<()> {
        if s >= self.model.num_states {
            return Err(E4Error::InvalidArgument(format!("state {s} out of range")));
        }
        self.state = s;
        Ok(())
    }

    /// Test gate: the hidden true model, for oracles and oracle-supplied
    /// uncertainty sets. Driver code must not call this.
    pub fn oracle_model(&self) -> &Cmdp {
        &self.model
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::{diameter, Step};
    use crate::oracle::bfs_min_steps;
    use crate::uncertainty::filter_models;

    #[test]
    fn deterministic_gridworld_rows_are_one_hot() {
        let spec = GridworldSpec { slip: 0.0, ..GridworldSpec::default() };
        let m = build_gridworld(&spec).unwrap();
        for s in 0..m.num_states {
            for a in 0..m.num_actions {
                let row = m.kernel_row(s, a);
                let ones = row.iter().filter(|&&p| (p - 1.0).abs() < 1e-12).count();
                let zeros = row.iter().filter(|&&p| p.abs() < 1e-12).count();
                assert_eq!(ones, 1);
                assert_eq!(zeros, m.num_states - 1);
            }
        }
    }

    #[test]
    fn all_rows_sum_to_one() {
        let m = build_gridworld(&GridworldSpec::default()).unwrap();
        assert_eq!(m.num_states * m.num_actions, 500);
        for s in 0..m.num_states {
            for a in 0..m.num_actions {
                let sum: f64 = m.kernel_row(s, a).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn corner_wall_action_mass_and_cost() {
        let spec = GridworldSpec::default();
        let m = build_gridworld(&spec).unwrap();
        // South-east corner, moving east into the wall. Slip outcomes south,
        // east, and stay keep the agent in place; south and east also bump.
        let corner = spec.state_id(spec.width - 1, 0);
        let row = m.kernel_row(corner, EAST);
        let tau = spec.slip;
        assert!(row[corner] >= 1.0 - tau);
        let expected_self = (1.0 - tau) + 3.0 * tau / 5.0;
        assert!((row[corner] - expected_self).abs() < 1e-12);
        let expected_cost = (1.0 - tau) + 2.0 * tau / 5.0;
        assert!((m.cost(corner, EAST) - expected_cost).abs() < 1e-12);
        // The stay action never bumps from anywhere.
        assert!(m.cost(corner, STAY) < tau);
    }

    #[test]
    fn boundary_progress_cycles_and_pays() {
        let spec = GridworldSpec::default();
        let m = build_gridworld(&spec).unwrap();
        let mut s = spec.state_id(0, 0);
        let mut visited = std::collections::HashSet::new();
        // Following progress actions with no slip traverses the full boundary.
        for _ in 0..(2 * spec.width + 2 * spec.height - 4) {
            let a = spec.progress_action(s).expect("boundary cell");
            assert_eq!(m.reward(s, a), 1.0);
            let (next, bumped) = spec.outcome(s, a);
            assert!(!bumped);
            assert!(visited.insert(s));
            s = next;
        }
        assert_eq!(s, spec.state_id(0, 0));
        assert_eq!(visited.len(), 2 * spec.width + 2 * spec.height - 4);
    }

    #[test]
    fn gridworld_diameter_matches_bfs() {
        let spec = GridworldSpec {
            slip: 0.0,
            width: 10,
            height: 10,
            ..GridworldSpec::default()
        };
        let m = build_gridworld(&spec).unwrap();
        let d = diameter(&m);
        assert!((d - 18.0).abs() < 1e-6, "diameter {d}");
        let bfs = bfs_min_steps(&m, spec.state_id(0, 0), spec.state_id(9, 9)).unwrap();
        assert_eq!(bfs, 18);
    }

    #[test]
    fn random_cmdp_is_deterministic_and_valid() {
        let a = random_cmdp(6, 3, 0.9, 3.0, 0.6, 42).unwrap();
        let b = random_cmdp(6, 3, 0.9, 3.0, 0.6, 42).unwrap();
        assert_eq!(a.kernel(), b.kernel());
        assert_eq!(a.rewards(), b.rewards());
        let c = random_cmdp(6, 3, 0.9, 3.0, 0.6, 43).unwrap();
        assert_ne!(a.kernel(), c.kernel());
        // Full density means full support.
        let full = random_cmdp(4, 2, 0.9, 3.0, 1.0, 7).unwrap();
        for s in 0..4 {
            for a in 0..2 {
                assert!(full.kernel_row(s, a).iter().all(|&p| p > 0.0));
            }
        }
        // A single state can only self-loop.
        let single = random_cmdp(1, 2, 0.9, 3.0, 1.0, 7).unwrap();
        assert_eq!(single.kernel_row(0, 0), &[1.0]);
    }

    #[test]
    fn sample_frequencies_approach_kernel() {
        let spec = GridworldSpec::default();
        let m = build_gridworld(&spec).unwrap();
        let s = spec.state_id(4, 4);
        let mut env = SampleEnv::new(m.clone(), 9, s).unwrap();
        let mut counts = vec![0usize; m.num_states];
        let n = 100_000;
        for _ in 0..n {
            let (_, _, next) = env.sample(env.state(), NORTH).unwrap();
            counts[next] += 1;
            env.reset_to(s).unwrap();
        }
        let row = m.kernel_row(s, NORTH);
        for (sp, &p) in row.iter().enumerate() {
            let freq = counts[sp] as f64 / n as f64;
            assert!(
                (freq - p).abs() <= 0.01,
                "state {sp}: freq {freq} vs p {p}"
            );
        }
    }

    #[test]
    fn sample_env_guards_state_mismatch() {
        let m = build_gridworld(&GridworldSpec::default()).unwrap();
        let mut env = SampleEnv::new(m, 1, 0).unwrap();
        assert!(env.sample(5, 0).is_err());
    }

    #[test]
    fn expert_set_narrows_to_south_and_east_after_east_run() {
        // The worked scenario: the agent hugs the south wall, bumps it once,
        // then takes six east moves ending on the south-east corner.
        let spec = GridworldSpec::default();
        let set = expert_model_set(&spec, 0.1, 2.0, 5).unwrap();
        let mut path = Vec::new();
        let bump_state = spec.state_id(3, 0);
        path.push(Step {
            state: bump_state,
            action: SOUTH,
            reward: 0.0,
            cost: 1.0,
            next_state: bump_state,
        });
        for x in 3..9 {
            path.push(Step {
                state: spec.state_id(x, 0),
                action: EAST,
                reward: 0.0,
                cost: 0.0,
                next_state: spec.state_id(x + 1, 0),
            });
        }
        let filtered = filter_models(&set, &path, 0.05);
        let active: Vec<usize> = (0..5).filter(|&i| filtered.active[i]).collect();
        assert_eq!(active, vec![expert::SOUTH_BOUND, expert::EAST_BOUND]);
    }

    #[test]
    fn expert_interior_model_matches_noslip_moves() {
        let spec = GridworldSpec::default();
        let set = expert_model_set(&spec, 0.1, 2.0, 5).unwrap();
        let interior = &set.models[expert::INTERIOR];
        let s = spec.state_id(4, 4);
        assert_eq!(interior.next[s * GRID_ACTIONS + NORTH], spec.state_id(4, 5));
        assert!(!interior.off_grid[s * GRID_ACTIONS + NORTH]);
        // Off the edge: clamped but flagged.
        let edge = spec.state_id(9, 4);
        assert_eq!(interior.next[edge * GRID_ACTIONS + EAST], edge);
        assert!(interior.off_grid[edge * GRID_ACTIONS + EAST]);
    }
}

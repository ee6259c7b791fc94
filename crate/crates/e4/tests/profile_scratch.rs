use e4::driver::{run, E4Config, EpsilonMode, SolverKind, UncertaintyKind, Phase};
use e4::env::{build_gridworld, expert_model_set, GridworldSpec, SampleEnv};
use e4::uncertainty::UncertaintySet;

fn base_cfg(spec: &GridworldSpec) -> E4Config {
    E4Config {
        budget: 10.0, gamma: 0.95, r_max: 1.0, c_max: 1.0, m_known: 6,
        epsilon_mode: EpsilonMode::Lemma9 { t_k: Some(150), t_u: Some(150) },
        solver: SolverKind::LagrangianDp, solver_iterations: 1, warm_start: true,
        uncertainty: UncertaintyKind::Nominal, filter_threshold: 0.05,
        delta: 0.1, delta_psi: 0.1, max_steps: 8000, seed: 0,
        tighten_budget: false, var_max_c: 0.0, kappa: 1.0,
        initial_known: spec.initial_known(),
    }
}

fn report(name: &str, log: &e4::driver::RunLog, elapsed: std::time::Duration) {
    let wander: usize = log.steps.iter().filter(|s| matches!(s.phase, Phase::Wander)).count();
    let escape: usize = log.steps.iter().filter(|s| matches!(s.phase, Phase::Escape)).count();
    let explore: usize = log.steps.iter().filter(|s| matches!(s.phase, Phase::Explore)).count();
    println!("{name}: time {elapsed:?} halt {:?} steps {} known {}/{} attempts {} explore/wander/escape {}/{}/{}",
        log.halt, log.steps.len(), log.known_at_halt, log.num_states, log.exploration_attempts,
        explore, wander, escape);
}

#[test]
fn diagnose_expert() {
    let spec = GridworldSpec { width: 5, height: 5, slip: 0.05, wall_cost: 1.0, budget: 10.0, gamma: 0.95 };
    let model = build_gridworld(&spec).unwrap();
    let mut cfg = base_cfg(&spec);
    cfg.uncertainty = UncertaintyKind::Models(expert_model_set(&spec, 0.1, 2.0, 5).unwrap());
    let t0 = std::time::Instant::now();
    let mut env = SampleEnv::new(model, 0, cfg.initial_known[0]).unwrap();
    let log = run(&mut env, &cfg).unwrap();
    report("expert", &log, t0.elapsed());
}

#[test]
fn diagnose_oracle() {
    let spec = GridworldSpec { width: 5, height: 5, slip: 0.05, wall_cost: 1.0, budget: 10.0, gamma: 0.95 };
    let model = build_gridworld(&spec).unwrap();
    let mut cfg = base_cfg(&spec);
    cfg.uncertainty = UncertaintyKind::Supplied(UncertaintySet::singleton_from(&model));
    let t0 = std::time::Instant::now();
    let mut env = SampleEnv::new(model.clone(), 0, cfg.initial_known[0]).unwrap();
    let log = run(&mut env, &cfg).unwrap();
    report("oracle", &log, t0.elapsed());
}

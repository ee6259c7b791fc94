//! Parallel-vs-sequential throughput on the data-parallel hot paths:
//! batch policy evaluation and replicated driver runs.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use e4::cmdp::{evaluate_policy, Horizon, TabularPolicy};
use e4::driver::{run, E4Config, EpsilonMode, SolverKind, UncertaintyKind};
use e4::env::{build_gridworld, random_cmdp, GridworldSpec, SampleEnv};
use e4::par;

fn batch_policy_evaluation(c: &mut Criterion) {
    let models: Vec<_> = (0..64)
        .map(|seed| random_cmdp(12, 3, 0.95, 3.0, 0.5, seed).unwrap())
        .collect();
    let policy = TabularPolicy::uniform(12, 3);
    let mut group = c.benchmark_group("batch_policy_evaluation");
    group.bench_function(BenchmarkId::new("sequential", models.len()), |b| {
        b.iter(|| {
            par::map_collect_seq(models.len(), |i| {
                let view = models[i].full_view();
                evaluate_policy(&view, &policy, Horizon::Infinite).unwrap().values[0]
            })
        })
    });
    #[cfg(feature = "parallel")]
    group.bench_function(BenchmarkId::new("parallel", models.len()), |b| {
        b.iter(|| {
            par::map_collect_par(models.len(), |i| {
                let view = models[i].full_view();
                evaluate_policy(&view, &policy, Horizon::Infinite).unwrap().values[0]
            })
        })
    });
    group.finish();
}

fn replicated_runs(c: &mut Criterion) {
    let spec = GridworldSpec {
        width: 5,
        height: 5,
        slip: 0.05,
        wall_cost: 1.0,
        budget: 10.0,
        gamma: 0.95,
    };
    let model = build_gridworld(&spec).unwrap();
    let cfg = E4Config {
        budget: 10.0,
        gamma: 0.95,
        r_max: 1.0,
        c_max: 1.0,
        m_known: 4,
        epsilon_mode: EpsilonMode::Lemma9 { t_k: Some(150), t_u: Some(150) },
        solver: SolverKind::LagrangianDp,
        solver_iterations: 1,
        warm_start: true,
        uncertainty: UncertaintyKind::Nominal,
        filter_threshold: 0.05,
        delta: 0.1,
        delta_psi: 0.1,
        max_steps: 4000,
        seed: 0,
        tighten_budget: false,
        var_max_c: 0.0,
        kappa: 1.0,
        initial_known: spec.initial_known(),
    };
    let replicates = 8usize;
    let run_one = |i: usize| {
        let mut rc = cfg.clone();
        rc.seed = i as u64;
        let mut env = SampleEnv::new(model.clone(), i as u64, rc.initial_known[0]).unwrap();
        run(&mut env, &rc).unwrap().steps.len()
    };
    let mut group = c.benchmark_group("replicated_runs");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("sequential", replicates), |b| {
        b.iter(|| par::map_collect_seq(replicates, run_one))
    });
    #[cfg(feature = "parallel")]
    group.bench_function(BenchmarkId::new("parallel", replicates), |b| {
        b.iter(|| par::map_collect_par(replicates, run_one))
    });
    group.finish();
}

criterion_group!(benches, batch_policy_evaluation, replicated_runs);
criterion_main!(benches);

//! Command-line entry points: run experiments, print safety parameters,
//! validate configurations.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::cmdp::diameter;
use crate::config::ExperimentConfig;
use crate::driver::{derive_safety_params, run, E4Config, EpsilonMode, HaltReason};
use crate::env::SampleEnv;
use crate::error::{E4Error, Result};
use crate::io::{run_log_csv, run_log_summary};
use crate::par;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Parser)]
#[command(name = "e4", about = "Safe explore/exploit/escape runs on constrained MDPs")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run seeded experiment replicates and write CSV/JSON logs.
    Run(RunArgs),
    /// Derive and print the safety parameters for given settings.
    Params(ParamsArgs),
    /// Statically validate a configuration file.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Solver override: pg | dp | lp.
    #[arg(long)]
    solver: Option<String>,
    /// Uncertainty override: none | l1 | bayes | models.
    #[arg(long)]
    uncertainty: Option<String>,
    /// Epsilon-mode override: algorithm1 | lemma9.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    m_known: Option<u32>,
    #[arg(long)]
    d: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long)]
    d: f64,
    #[arg(long)]
    gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    c_max: f64,
    #[arg(long, default_value_t = 1.0)]
    r_max: f64,
    /// algorithm1 | lemma9
    #[arg(long, default_value = "lemma9")]
    mode: String,
    #[arg(long)]
    t_k: Option<usize>,
    #[arg(long)]
    t_u: Option<usize>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    config: PathBuf,
}

/// Parses arguments and dispatches; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match cli.command {
        Command::Run(args) => exit_code(cmd_run(&args)),
        Command::Params(args) => exit_code(cmd_params(&args)),
        Command::Validate(args) => exit_code(cmd_validate(&args)),
    }
}

fn exit_code(result: Result<()>) -> i32 {
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                E4Error::ConfigInfeasible { .. } => EXIT_INFEASIBLE,
                E4Error::RunAborted(_) => EXIT_RUNTIME,
                E4Error::Io(_) => EXIT_RUNTIME,
                _ => EXIT_CONFIG,
            }
        }
    }
}

fn apply_overrides(cfg: &mut ExperimentConfig, args: &RunArgs) {
    if let Some(seed) = args.seed {
        cfg.e4.seed = seed;
    }
    if let Some(replicates) = args.replicates {
        cfg.output.replicates = replicates;
    }
    if let Some(out) = &args.out {
        cfg.output.dir = out.clone();
    }
    if let Some(solver) = &args.solver {
        cfg.solver.kind = solver.clone();
    }
    if let Some(unc) = &args.uncertainty {
        cfg.uncertainty.kind = unc.clone();
    }
    if let Some(mode) = &args.mode {
        cfg.e4.mode = mode.clone();
    }
    if let Some(m) = args.m_known {
        cfg.e4.m_known = m;
    }
    if let Some(d) = args.d {
        cfg.e4.d = d;
    }
    if let Some(g) = args.gamma {
        cfg.e4.gamma = g;
    }
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    apply_overrides(&mut cfg, args);
    let base_dir = args.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    let driver_cfg = cfg.driver_config(&base_dir)?;
    // Surface infeasible safety parameters before any run starts.
    let effective = if driver_cfg.tighten_budget {
        crate::driver::tightened_budget(
            driver_cfg.budget,
            driver_cfg.gamma,
            driver_cfg.var_max_c,
            driver_cfg.c_max,
        )?
        .0
    } else {
        driver_cfg.budget
    };
    derive_safety_params(
        effective,
        driver_cfg.gamma,
        driver_cfg.c_max,
        driver_cfg.r_max,
        driver_cfg.epsilon_mode,
    )?;
    let (model, _) = cfg.build_environment(&base_dir)?;
    std::fs::create_dir_all(&cfg.output.dir)?;

    let replicates = cfg.output.replicates.max(1);
    let out_dir = cfg.output.dir.clone();
    let results = par::map_collect(replicates, |i| {
        let seed = driver_cfg.seed.wrapping_add(i as u64);
        let mut run_cfg = replicate_config(&driver_cfg, seed);
        run_cfg.seed = seed;
        let start = run_cfg.initial_known[0];
        let mut env = SampleEnv::new(model.clone(), seed, start)?;
        let log = run(&mut env, &run_cfg)?;
        let csv = run_log_csv(&log);
        let summary = run_log_summary(&log);
        std::fs::write(out_dir.join(format!("run_{i}.csv")), csv)?;
        std::fs::write(
            out_dir.join(format!("run_{i}.json")),
            serde_json::to_string_pretty(&summary).expect("summary is valid json"),
        )?;
        Ok::<_, E4Error>(log)
    });
    let mut logs = Vec::with_capacity(replicates);
    for r in results {
        logs.push(r?);
    }

    let aggregate = aggregate_summary(&logs);
    std::fs::write(
        cfg.output.dir.join("aggregate.json"),
        serde_json::to_string_pretty(&aggregate).expect("aggregate is valid json"),
    )?;
    for log in &logs {
        if matches!(log.halt, HaltReason::Aborted(_)) {
            return Err(E4Error::RunAborted("one or more replicates aborted".into()));
        }
    }
    println!(
        "{} replicate(s) written to {}",
        replicates,
        cfg.output.dir.display()
    );
    Ok(())
}

fn replicate_config(base: &E4Config, seed: u64) -> E4Config {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg
}

fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

fn aggregate_summary(logs: &[crate::driver::RunLog]) -> serde_json::Value {
    let costs: Vec<f64> = logs.iter().map(|l| l.global_discounted_cost).collect();
    let values: Vec<f64> = logs.iter().map(|l| l.final_value).collect();
    let known: Vec<f64> = logs
        .iter()
        .map(|l| l.known_at_halt as f64 / l.num_states as f64)
        .collect();
    let (cost_mean, cost_ci) = mean_ci(&costs);
    let (value_mean, value_ci) = mean_ci(&values);
    let (known_mean, known_ci) = mean_ci(&known);

    // Known-state curve on a shared step grid.
    let min_len = logs.iter().map(|l| l.steps.len()).min().unwrap_or(0);
    let grid: Vec<usize> = if min_len == 0 {
        Vec::new()
    } else {
        (0..100.min(min_len)).map(|i| i * min_len / 100.min(min_len)).collect()
    };
    let curve: Vec<serde_json::Value> = grid
        .iter()
        .map(|&idx| {
            let mean = logs.iter().map(|l| l.steps[idx].known_count as f64).sum::<f64>()
                / logs.len() as f64;
            serde_json::json!({ "step": idx, "mean_known": mean })
        })
        .collect();

    serde_json::json!({
        "replicates": logs.len(),
        "cumulative_discounted_cost": { "mean": cost_mean, "ci95": cost_ci },
        "final_value": { "mean": value_mean, "ci95": value_ci },
        "known_fraction": { "mean": known_mean, "ci95": known_ci },
        "exploration_attempts": logs.iter().map(|l| l.exploration_attempts).collect::<Vec<_>>(),
        "budget_violations": logs.iter().map(|l| l.budget_violations).collect::<Vec<_>>(),
        "known_curve": curve,
    })
}

fn cmd_params(args: &ParamsArgs) -> Result<()> {
    let mode = match args.mode.as_str() {
        "algorithm1" => EpsilonMode::Algorithm1,
        "lemma9" => EpsilonMode::Lemma9 { t_k: args.t_k, t_u: args.t_u },
        other => return Err(E4Error::InvalidArgument(format!("unknown mode `{other}`"))),
    };
    let p = derive_safety_params(args.d, args.gamma, args.c_max, args.r_max, mode)?;
    println!("epsilon   {:.6}", p.epsilon);
    println!("l         {:.6}", p.l);
    println!("d_prime   {:.6}", p.d_prime);
    println!("T         {}", p.horizon);
    println!("T_prime   {}", p.escape_horizon);
    Ok(())
}

fn cmd_validate(args: &ValidateArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let base_dir = args.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut problems = Vec::new();

    let driver_cfg = match cfg.driver_config(&base_dir) {
        Ok(c) => Some(c),
        Err(e) => {
            problems.push(e.to_string());
            None
        }
    };
    let model = match cfg.build_environment(&base_dir) {
        Ok((m, _)) => {
            if let Err(e) = m.validate() {
                problems.push(e.to_string());
            }
            Some(m)
        }
        Err(e) => {
            problems.push(e.to_string());
            None
        }
    };

    if let (Some(cfg_ok), Some(model)) = (&driver_cfg, &model) {
        match derive_safety_params(
            cfg_ok.budget,
            cfg_ok.gamma,
            cfg_ok.c_max,
            cfg_ok.r_max,
            cfg_ok.epsilon_mode,
        ) {
            Ok(params) => {
                // With the true model on hand, check the escape-time
                // requirement on the initially unknown region.
                let d = diameter(model);
                if d.is_finite() {
                    if d > (params.escape_horizon as f64) - 1.0 {
                        eprintln!(
                            "warning: model diameter {d:.2} exceeds T' - 1 = {}; \
                             deep excursions cannot rely on timely escape",
                            params.escape_horizon - 1
                        );
                    }
                } else {
                    problems.push("model is not strongly connected under any policy".into());
                }
            }
            Err(e) => problems.push(e.to_string()),
        }
    }

    if problems.is_empty() {
        println!("configuration valid");
        Ok(())
    } else {
        Err(E4Error::Validation(problems))
    }
}

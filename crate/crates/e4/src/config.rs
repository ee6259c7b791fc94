//! The experiment configuration file (TOML) and its validation.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::cmdp::Cmdp;
use crate::driver::{E4Config, EpsilonMode, SolverKind, UncertaintyKind};
use crate::env::{build_gridworld, GridworldSpec};
use crate::error::{E4Error, Result};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub environment: EnvironmentBlock,
    pub e4: E4Block,
    #[serde(default)]
    pub solver: SolverBlock,
    #[serde(default)]
    pub uncertainty: UncertaintyBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentBlock {
    pub kind: String, // "gridworld" | "file"
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub slip: Option<f64>,
    pub wall_cost: Option<f64>,
    /// Model file path for `kind = "file"`.
    pub path: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct E4Block {
    pub d: f64,
    pub gamma: f64,
    pub m_known: u32,
    #[serde(default = "default_mode")]
    pub mode: String, // "algorithm1" | "lemma9"
    pub t_k: Option<usize>,
    pub t_u: Option<usize>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_delta")]
    pub delta_psi: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub relaxed_switch: bool,
    #[serde(default)]
    pub tighten_budget: bool,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    /// Initial known states; defaults to the gridworld's south strip.
    pub initial_known: Option<Vec<usize>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    #[serde(default = "default_solver")]
    pub kind: String, // "pg" | "dp" | "lp"
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_true")]
    pub warm_start: bool,
}

impl Default for SolverBlock {
    fn default() -> Self {
        SolverBlock {
            kind: default_solver(),
            iterations: default_iterations(),
            warm_start: true,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintyBlock {
    #[serde(default = "default_uncertainty")]
    pub kind: String, // "none" | "l1" | "bayes" | "models"
    pub path: Option<PathBuf>,
    #[serde(default = "default_filter_threshold")]
    pub filter_threshold: f64,
}

impl Default for UncertaintyBlock {
    fn default() -> Self {
        UncertaintyBlock {
            kind: default_uncertainty(),
            path: None,
            filter_threshold: default_filter_threshold(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock {
            dir: default_out_dir(),
            replicates: default_replicates(),
        }
    }
}

fn default_mode() -> String {
    "lemma9".into()
}
fn default_delta() -> f64 {
    0.1
}
fn default_max_steps() -> usize {
    2_000_000
}
fn default_true() -> bool {
    true
}
fn default_kappa() -> f64 {
    1.0
}
fn default_solver() -> String {
    "dp".into()
}
fn default_iterations() -> usize {
    20_000
}
fn default_uncertainty() -> String {
    "models".into()
}
fn default_filter_threshold() -> f64 {
    0.05
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_replicates() -> usize {
    1
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| E4Error::Parse {
            line: e.span().map(|s| s.start).unwrap_or(0),
            msg: format!("{path:?}: {e}"),
        })
    }

    /// The environment model plus the grid geometry when one exists.
    pub fn build_environment(&self, base_dir: &Path) -> Result<(Cmdp, Option<GridworldSpec>)> {
        match self.environment.kind.as_str() {
            "gridworld" => {
                let spec = GridworldSpec {
                    width: self.environment.width.unwrap_or(10),
                    height: self.environment.height.unwrap_or(10),
                    slip: self.environment.slip.unwrap_or(0.05),
                    wall_cost: self.environment.wall_cost.unwrap_or(1.0),
                    budget: self.e4.d,
                    gamma: self.e4.gamma,
                };
                Ok((build_gridworld(&spec)?, Some(spec)))
            }
            "file" => {
                let path = self.environment.path.as_ref().ok_or_else(|| {
                    E4Error::InvalidArgument("environment.kind = \"file\" needs a path".into())
                })?;
                let resolved = if path.is_absolute() {
                    path.clone()
                } else {
                    base_dir.join(path)
                };
                Ok((crate::io::load_cmdp(&resolved)?, None))
            }
            other => Err(E4Error::InvalidArgument(format!("unknown environment kind `{other}`"))),
        }
    }

    /// Validates and lowers into the driver configuration.
    pub fn driver_config(&self, base_dir: &Path) -> Result<E4Config> {
        if !self.e4.relaxed_switch {
            return Err(E4Error::InvalidArgument(
                "the idealised switch needs the unknown true optimum; only relaxed_switch = true is runnable"
                    .into(),
            ));
        }
        let mode = match self.e4.mode.as_str() {
            "algorithm1" => EpsilonMode::Algorithm1,
            "lemma9" => EpsilonMode::Lemma9 { t_k: self.e4.t_k, t_u: self.e4.t_u },
            other => {
                return Err(E4Error::InvalidArgument(format!("unknown epsilon mode `{other}`")))
            }
        };
        let solver = match self.solver.kind.as_str() {
            "pg" => SolverKind::PolicyGradient,
            "dp" => SolverKind::LagrangianDp,
            "lp" => SolverKind::OccupationLp,
            other => return Err(E4Error::InvalidArgument(format!("unknown solver `{other}`"))),
        };
        let (model, grid) = self.build_environment(base_dir)?;
        let initial_known = match (&self.e4.initial_known, &grid) {
            (Some(list), _) => list.clone(),
            (None, Some(g)) => g.initial_known(),
            (None, None) => {
                return Err(E4Error::InvalidArgument(
                    "file environments need e4.initial_known".into(),
                ))
            }
        };
        let uncertainty = match self.uncertainty.kind.as_str() {
            "none" => UncertaintyKind::Nominal,
            "l1" => UncertaintyKind::L1,
            "bayes" => UncertaintyKind::Bayes,
            "models" => {
                let grid = grid.as_ref().ok_or_else(|| {
                    E4Error::InvalidArgument(
                        "uncertainty.kind = \"models\" needs a gridworld environment".into(),
                    )
                })?;
                let set = match &self.uncertainty.path {
                    Some(p) => {
                        let resolved =
                            if p.is_absolute() { p.clone() } else { base_dir.join(p) };
                        crate::io::load_model_set(&resolved, grid)?
                    }
                    None => crate::env::expert_model_set(grid, 0.1, 2.0, 5)?,
                };
                UncertaintyKind::Models(set)
            }
            other => {
                return Err(E4Error::InvalidArgument(format!("unknown uncertainty kind `{other}`")))
            }
        };
        let cfg = E4Config {
            budget: self.e4.d,
            gamma: self.e4.gamma,
            r_max: model.r_max,
            c_max: model.c_max,
            m_known: self.e4.m_known,
            epsilon_mode: mode,
            solver,
            solver_iterations: self.solver.iterations,
            warm_start: self.solver.warm_start,
            uncertainty,
            filter_threshold: self.uncertainty.filter_threshold,
            delta: self.e4.delta,
            delta_psi: self.e4.delta_psi,
            max_steps: self.e4.max_steps,
            seed: self.e4.seed,
            tighten_budget: self.e4.tighten_budget,
            var_max_c: model.var_max_c,
            kappa: self.e4.kappa,
            initial_known,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GRID_CFG: &str = r#"
[environment]
kind = "gridworld"

[e4]
d = 10.0
gamma = 0.99
m_known = 32
mode = "lemma9"
t_k = 600
t_u = 600
"#;

    #[test]
    fn parses_and_lowers_gridworld_config() {
        let cfg: ExperimentConfig = toml::from_str(GRID_CFG).unwrap();
        let driver = cfg.driver_config(Path::new(".")).unwrap();
        assert_eq!(driver.m_known, 32);
        assert_eq!(driver.initial_known.len(), 9);
        assert!(matches!(driver.uncertainty, UncertaintyKind::Models(_)));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{GRID_CFG}\nnot_a_key = 1\n");
        assert!(toml::from_str::<ExperimentConfig>(&text).is_err());
        let nested = GRID_CFG.replace("m_known = 32", "m_known = 32\nsurprise = true");
        assert!(toml::from_str::<ExperimentConfig>(&nested).is_err());
    }

    #[test]
    fn idealised_switch_is_rejected() {
        let text = GRID_CFG.replace("m_known = 32", "m_known = 32\nrelaxed_switch = false");
        let cfg: ExperimentConfig = toml::from_str(&text).unwrap();
        assert!(cfg.driver_config(Path::new(".")).is_err());
    }
}

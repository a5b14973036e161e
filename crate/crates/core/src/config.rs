//! TOML run configuration and the resolved scenario built from it.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::disturbance::{estimate_lw, scheme_constants, DisturbanceModel, SchemeConstants, TubeBoundSpec};
use crate::error::{Error, Result};
use crate::ilf::{local_lipschitz_estimate, tightening_constant, IlfDesign, IlfParams, DEFAULT_LIPSCHITZ_SAFETY};
use crate::linalg::{from_rows, Matrix, Vector};
use crate::model::{
    ChanceConstraint, ConstraintFn, ConstraintSpec, CostSpec, DcDcConverter, DcDcParams, HardConstraint,
    LinearSystem, SystemModel,
};
use crate::nlp::SolveOptions;
use crate::ocp::{OcpSetup, TerminalDesign};
use crate::report::config_hash;
use crate::sampling::BoxDomain;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub ilf: IlfParams,
    pub disturbance: DisturbanceConfig,
    pub constraints: ConstraintsConfig,
    pub cost: CostConfig,
    pub ocp: OcpConfig,
    /// Operating domain used by every sampled design check.
    pub domain: BoxDomain,
    #[serde(default)]
    pub solver: SolveOptions,
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub checks: CheckConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    /// Boost converter with `θ = [α − α₀, δ − δ₀]`.
    Dcdc(DcDcParams),
    /// `x⁺ = Ax + Bu + G(x, u)θ` with constant `G`.
    Linear(LinearModelConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearModelConfig {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceConfig {
    /// Covariance `Σ_θ` of the untruncated Gaussian.
    pub covariance: Vec<Vec<f64>>,
    /// Truncation radius `r` of `θᵀΣ⁻¹θ ≤ r²`.
    pub radius: f64,
    pub quantile_samples: usize,
    pub quantile_seed: u64,
    /// `[level, L_w]` pairs; omitted means estimated from samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lw: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintsConfig {
    #[serde(default)]
    pub hard: Vec<ConstraintConfig>,
    #[serde(default)]
    pub chance: Vec<ConstraintConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintConfig {
    pub name: String,
    pub map: MapConfig,
    /// Omitted means estimated over the domain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<f64>,
    /// Probability level; required for chance constraints only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MapConfig {
    /// `aᵀx + bᵀu + offset`
    Affine { state: Vec<f64>, input: Vec<f64>, offset: f64 },
    /// `scale·x_i·x_j + offset`
    Product { i: usize, j: usize, scale: f64, offset: f64 },
}

impl MapConfig {
    fn build(&self) -> ConstraintFn {
        match self {
            MapConfig::Affine { state, input, offset } => ConstraintFn::Affine {
                state: Vector::from_row_slice(state),
                input: Vector::from_row_slice(input),
                offset: *offset,
            },
            MapConfig::Product { i, j, scale, offset } => ConstraintFn::StateProduct {
                i: *i,
                j: *j,
                scale: *scale,
                offset: *offset,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcpConfig {
    pub horizon: usize,
    #[serde(default)]
    pub eliminate_tubes: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal: Option<TerminalConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalConfig {
    pub enabled: bool,
    pub p_f: Vec<Vec<f64>>,
    pub k_f: Vec<Vec<f64>>,
    pub gamma_f: f64,
    pub s_f: f64,
    pub w_bar: f64,
}

/// How `u(t+1)` is resolved when estimating next-step satisfaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// One extra OCP solve per sampled successor.
    #[default]
    Nested,
    /// Reuse `u*_{1|t}` of the current solution.
    Shifted,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Nested => "nested",
            EvalMode::Shifted => "shifted",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nested" => Ok(EvalMode::Nested),
            "shifted" => Ok(EvalMode::Shifted),
            other => Err(Error::Usage(format!("unknown evaluation mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub steps: usize,
    pub replications: usize,
    pub seed: u64,
    pub initial_state: Vec<f64>,
    #[serde(default)]
    pub eval_mode: EvalMode,
    /// Closed-loop states drawn for the chance-tightening suite.
    #[serde(default = "default_chance_instances")]
    pub chance_instances: usize,
    /// `θ` samples per drawn state.
    #[serde(default = "default_chance_trials")]
    pub chance_trials: usize,
}

fn default_chance_instances() -> usize {
    20
}

fn default_chance_trials() -> usize {
    10_000
}

/// Sample counts of the offline checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckConfig {
    pub seed: u64,
    pub contraction_samples: usize,
    pub coverage_instances: usize,
    pub coverage_samples: usize,
    pub monotonicity_samples: usize,
    pub terminal_samples: usize,
    pub lipschitz_samples: usize,
    pub lipschitz_safety: f64,
    pub lw_samples: usize,
    pub lw_safety: f64,
    pub tightening_samples: usize,
    pub constant_samples: usize,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            seed: 1,
            contraction_samples: 10_000,
            coverage_instances: 50,
            coverage_samples: 10_000,
            monotonicity_samples: 10_000,
            terminal_samples: 10_000,
            lipschitz_samples: 20_000,
            lipschitz_safety: DEFAULT_LIPSCHITZ_SAFETY,
            lw_samples: 20_000,
            lw_safety: DEFAULT_LIPSCHITZ_SAFETY,
            tightening_samples: 20_000,
            constant_samples: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: String,
    pub plot: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            directory: "out".into(),
            plot: true,
        }
    }
}

impl RunConfig {
    /// Parses and validates. Unknown keys and missing required keys are
    /// reported with their location.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)?;
        let cfg = Self::from_toml_str(&text)?;
        Ok((cfg, text))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    /// Cheap structural invariants checked at parse time.
    pub fn validate(&self) -> Result<()> {
        let rho = self.ilf.rho;
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::Config(format!("ilf.rho = {rho} must lie in (0, 1)")));
        }
        if self.ocp.horizon == 0 {
            return Err(Error::Config("ocp.horizon must be positive".into()));
        }
        if !(self.disturbance.radius > 0.0) {
            return Err(Error::Config("disturbance.radius must be positive".into()));
        }
        if self.disturbance.quantile_samples == 0 {
            return Err(Error::Config("disturbance.quantile_samples must be positive".into()));
        }
        for c in &self.constraints.hard {
            if c.level.is_some() {
                return Err(Error::Config(format!("hard constraint `{}` cannot carry a level", c.name)));
            }
        }
        for c in &self.constraints.chance {
            match c.level {
                Some(p) if p > 0.0 && p <= 1.0 => {}
                Some(p) => {
                    return Err(Error::Config(format!("chance constraint `{}`: level {p} outside (0, 1]", c.name)))
                }
                None => return Err(Error::Config(format!("chance constraint `{}` needs a level", c.name))),
            }
        }
        if let Some(table) = &self.disturbance.lw {
            for &p in &self.levels() {
                if !table.iter().any(|e| (e[0] - p).abs() <= 1e-12) {
                    return Err(Error::Config(format!("level {p} missing from disturbance.lw")));
                }
            }
        }
        Ok(())
    }

    /// `𝒫 ∪ {1}`, ascending.
    pub fn levels(&self) -> Vec<f64> {
        let mut levels: Vec<f64> = self.constraints.chance.iter().filter_map(|c| c.level).collect();
        levels.push(1.0);
        levels.sort_by(f64::total_cmp);
        levels.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);
        levels
    }
}

/// How a constraint's Lipschitz constant was obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConstraint {
    pub name: String,
    pub lipschitz: f64,
    pub estimated: bool,
    pub tightening: f64,
}

/// Everything resolved from a configuration: model, design, disturbance,
/// tightening constants and the OCP definition.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: RunConfig,
    pub config_hash: String,
    pub setup: OcpSetup,
    pub domain: BoxDomain,
    pub resolved: Vec<ResolvedConstraint>,
    pub lw_estimated: bool,
    pub constants: SchemeConstants,
    pub x0: Vector,
}

fn matrix(name: &str, rows: &[Vec<f64>]) -> Result<Matrix> {
    from_rows(rows).map_err(|e| Error::Config(format!("{name}: {e}")))
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let (cfg, text) = RunConfig::load(path)?;
        Self::build(cfg, config_hash(&text))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::build(RunConfig::from_toml_str(text)?, config_hash(text))
    }

    pub fn build(config: RunConfig, config_hash: String) -> Result<Self> {
        config.validate()?;
        let checks = &config.checks;
        let model = match &config.model {
            ModelConfig::Dcdc(p) => SystemModel::new(Arc::new(DcDcConverter::new(*p)?)),
            ModelConfig::Linear(l) => SystemModel::new(Arc::new(LinearSystem::new(
                matrix("model.a", &l.a)?,
                matrix("model.b", &l.b)?,
                matrix("model.g", &l.g)?,
            )?)),
        };
        let (n, m) = (model.n(), model.m());
        config.domain.validate(n, m)?;
        let design = IlfDesign::from_params(&config.ilf)?;
        let levels = config.levels();
        let mut cache_levels = levels.clone();
        if let Some(t) = &config.disturbance.lw {
            cache_levels.extend(t.iter().map(|e| e[0]));
        }
        let dm = DisturbanceModel::new(
            matrix("disturbance.covariance", &config.disturbance.covariance)?,
            config.disturbance.radius,
            &cache_levels,
            config.disturbance.quantile_samples,
            config.disturbance.quantile_seed,
        )?;
        let model = model.with_support(dm.support());
        let (lw, lw_estimated) = match &config.disturbance.lw {
            Some(t) => (t.iter().map(|e| (e[0], e[1])).collect(), false),
            None => (
                estimate_lw(
                    &dm,
                    &model,
                    &design,
                    &config.domain,
                    &levels,
                    checks.lw_samples,
                    checks.seed,
                    checks.lw_safety,
                )?,
                true,
            ),
        };
        let tb = TubeBoundSpec::new(&design, lw)?;

        let mut resolved = Vec::new();
        let mut resolve = |c: &ConstraintConfig, map: &ConstraintFn, salt: u64| -> Result<(f64, f64)> {
            let (l, estimated) = match c.lipschitz {
                Some(l) => (l, false),
                None => {
                    let est = local_lipschitz_estimate(
                        map,
                        &design,
                        &config.domain,
                        checks.lipschitz_samples,
                        checks.seed.wrapping_add(salt),
                        checks.lipschitz_safety,
                    )?;
                    (est.inflated, true)
                }
            };
            let tightening = tightening_constant(l, &design)?;
            resolved.push(ResolvedConstraint {
                name: c.name.clone(),
                lipschitz: l,
                estimated,
                tightening,
            });
            Ok((l, tightening))
        };
        let mut hard = Vec::new();
        for (i, c) in config.constraints.hard.iter().enumerate() {
            let map = c.map.build();
            let (l, t) = resolve(c, &map, 100 + i as u64)?;
            hard.push(HardConstraint {
                name: c.name.clone(),
                map,
                lipschitz: Some(l),
                tightening: Some(t),
            });
        }
        let mut chance = Vec::new();
        for (j, c) in config.constraints.chance.iter().enumerate() {
            let map = c.map.build();
            let (l, t) = resolve(c, &map, 200 + j as u64)?;
            chance.push(ChanceConstraint {
                name: c.name.clone(),
                map,
                lipschitz: Some(l),
                tightening: Some(t),
                level: c.level.expect("validated"),
            });
        }
        let constraints = ConstraintSpec::new(hard, chance, n, m)?;

        let terminal = match &config.ocp.terminal {
            Some(t) if t.enabled => Some(TerminalDesign::new(
                matrix("ocp.terminal.p_f", &t.p_f)?,
                matrix("ocp.terminal.k_f", &t.k_f)?,
                t.gamma_f,
                t.s_f,
                t.w_bar,
            )?),
            _ => None,
        };
        let cost = CostSpec::new(
            matrix("cost.q", &config.cost.q)?,
            matrix("cost.r", &config.cost.r)?,
            terminal.as_ref().map(|t| t.p_f.clone()),
            config.ocp.horizon,
        )?;
        let constants = scheme_constants(
            &tb,
            &dm,
            &model,
            &design,
            &config.domain,
            checks.constant_samples,
            checks.seed,
            &[],
        )?;
        let mut setup = OcpSetup::new(
            model,
            constraints,
            cost,
            design,
            dm,
            tb,
            terminal,
            config.ocp.eliminate_tubes,
        )?;
        setup.fd_step = config.solver.fd_step;
        if config.simulation.initial_state.len() != n {
            return Err(Error::Config(format!(
                "simulation.initial_state has {} entries, the model has {n} states",
                config.simulation.initial_state.len()
            )));
        }
        let x0 = Vector::from_row_slice(&config.simulation.initial_state);
        let domain = config.domain.clone();
        Ok(Scenario {
            config,
            config_hash,
            setup,
            domain,
            resolved,
            lw_estimated,
            constants,
            x0,
        })
    }

    pub fn seed(&self) -> u64 {
        self.config.simulation.seed
    }
}

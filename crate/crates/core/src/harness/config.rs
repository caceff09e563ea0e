//! Experiment configuration, read from TOML.
//!
//! A minimal file:
//!
//! ```toml
//! horizon = 1000
//! reps = 10
//! methods = ["ipw"]
//! scenario = { preset = 1 }
//! policy = { kind = "uniform" }
//! ```
//!
//! Everything else has a default; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{build_feature_pool, FeaturePool, NoiseMode, PoolSource, Scenario, Surrogate, SurrogateFn};
use crate::error::{Error, Result};
use crate::inference::MethodKind;
use crate::mestim::{Family, FeatureMap, WorkingModel};
use crate::nuisance::NuisanceConfig;
use crate::policies::{ActionDistribution, Policy, PolicyKind};

/// Checkpoints used when none are listed (those up to the horizon, plus the
/// horizon itself).
pub const DEFAULT_CHECKPOINTS: [usize; 5] = [500, 1000, 2000, 5000, 10000];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub reps: usize,
    /// Worker threads; 0 uses every available core.
    #[serde(default)]
    pub workers: usize,
    /// Number of rounds `T`.
    pub horizon: usize,
    #[serde(default)]
    pub checkpoints: Vec<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub methods: Vec<MethodKind>,
    /// Probability that a round is routed to the held-out history when
    /// splitting.
    #[serde(default = "default_split_ratio")]
    pub split_ratio: f64,
    /// External pool size as a multiple of the checkpoint.
    #[serde(default = "default_external_ratio")]
    pub external_ratio: f64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub scenario: ScenarioSpec,
    pub policy: PolicyKind,
    /// Overrides the policy's propensity floor.
    #[serde(default)]
    pub floor: Option<f64>,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub eval_policy: EvalPolicySpec,
    #[serde(default)]
    pub pool: PoolSpec,
    #[serde(default)]
    pub nuisance: NuisanceSpec,
}

fn default_alpha() -> f64 {
    0.2
}
fn default_split_ratio() -> f64 {
    0.5
}
fn default_external_ratio() -> f64 {
    1.0
}
fn default_out() -> PathBuf {
    PathBuf::from("results")
}

/// A preset (optionally truncated to fewer arms) or fully custom scenario.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub preset: Option<u8>,
    pub arms: Option<usize>,
    pub beta1: Option<Vec<f64>>,
    pub beta2: Option<Vec<f64>>,
    pub gamma: Option<Vec<f64>>,
    pub base_noise_sd: Option<f64>,
    pub mode: Option<NoiseMode>,
    /// Outcome threshold, or `"auto"` for the population mean under the
    /// evaluation policy. Defaults to `"auto"` for the logistic family.
    pub binarize: Option<Binarize>,
    /// Name used in output files.
    pub label: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Binarize {
    Threshold(f64),
    Keyword(AutoKeyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AutoKeyword {
    #[serde(rename = "auto")]
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_family")]
    pub family: Family,
    #[serde(default = "default_features")]
    pub features: FeatureMap,
}

fn default_family() -> Family {
    Family::Linear
}
fn default_features() -> FeatureMap {
    FeatureMap::OneHot
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { family: default_family(), features: default_features() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvalPolicySpec {
    #[default]
    Uniform,
    Fixed {
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum PoolSpec {
    Synthetic {
        #[serde(default = "default_pool_size")]
        size: usize,
        #[serde(default = "default_pool_dim")]
        dim: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_mean_fn")]
        mean: SurrogateFn,
        #[serde(default = "default_variance_fn")]
        variance: SurrogateFn,
    },
    Csv {
        path: PathBuf,
        feature_columns: Vec<String>,
        outcome_column: String,
        /// Neighbors used to fit the surrogate moments.
        #[serde(default = "default_surrogate_k")]
        k: usize,
    },
}

fn default_pool_size() -> usize {
    500
}
fn default_pool_dim() -> usize {
    5
}
fn default_mean_fn() -> SurrogateFn {
    SurrogateFn::Coordinate { index: 0 }
}
fn default_variance_fn() -> SurrogateFn {
    SurrogateFn::Constant { value: 1.0 }
}
fn default_surrogate_k() -> usize {
    25
}

impl Default for PoolSpec {
    fn default() -> Self {
        Self::Synthetic {
            size: default_pool_size(),
            dim: default_pool_dim(),
            seed: 0,
            mean: default_mean_fn(),
            variance: default_variance_fn(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuisanceSpec {
    #[serde(default = "default_k")]
    pub k: usize,
    /// Retrain after this many new observations.
    #[serde(default = "default_cadence")]
    pub cadence: usize,
    #[serde(default = "default_variance_floor")]
    pub variance_floor: f64,
}

fn default_k() -> usize {
    NuisanceConfig::default().k
}
fn default_cadence() -> usize {
    NuisanceConfig::default().cadence
}
fn default_variance_floor() -> f64 {
    NuisanceConfig::default().variance_floor
}

impl Default for NuisanceSpec {
    fn default() -> Self {
        Self { k: default_k(), cadence: default_cadence(), variance_floor: default_variance_floor() }
    }
}

/// Reads and validates a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Parses and validates config text.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.fill_defaults();
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    fn fill_defaults(&mut self) {
        if self.checkpoints.is_empty() {
            self.checkpoints = DEFAULT_CHECKPOINTS.iter().copied().filter(|c| *c < self.horizon).collect();
            self.checkpoints.push(self.horizon);
        }
        if self.model.family == Family::Logistic && self.scenario.binarize.is_none() {
            self.scenario.binarize = Some(Binarize::Keyword(AutoKeyword::Auto));
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.reps == 0 {
            return bad("reps must be at least 1".into());
        }
        if self.horizon == 0 {
            return bad("horizon must be positive".into());
        }
        if self.methods.is_empty() {
            return bad("methods must list at least one method".into());
        }
        if let Some(c) = self.checkpoints.iter().find(|c| **c == 0 || **c > self.horizon) {
            return bad(format!("checkpoint {c} outside 1..={}", self.horizon));
        }
        if self.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return bad("checkpoints must be strictly increasing".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0,1), got {}", self.alpha));
        }
        if self.methods.contains(&MethodKind::MaipwmSplitting) && !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!("split_ratio must lie in (0,1) for maipwm_splitting, got {}", self.split_ratio));
        }
        if self.methods.contains(&MethodKind::MaipwmExternal) && !(self.external_ratio > 0.0) {
            return bad(format!("external_ratio must be positive, got {}", self.external_ratio));
        }
        self.policy.validate()?;
        if let Some(f) = self.floor {
            if !(f > 0.0 && f < 1.0) {
                return bad(format!("floor must lie in (0,1), got {f}"));
            }
        }
        if self.nuisance.k == 0 || self.nuisance.cadence == 0 || !(self.nuisance.variance_floor > 0.0) {
            return bad("nuisance k, cadence and variance_floor must be positive".into());
        }
        let scn = self.base_scenario()?;
        let policy = self.deployed_policy();
        if policy.floor * scn.arms as f64 > 1.0 {
            return bad(format!("floor {} infeasible for {} arms", policy.floor, scn.arms));
        }
        self.eval_policy(scn.arms)?;
        if let Some(Binarize::Threshold(t)) = self.scenario.binarize {
            if !t.is_finite() {
                return bad("binarize threshold must be finite".into());
            }
        }
        if self.model.family == Family::Logistic && self.scenario.binarize.is_none() {
            return bad("the logistic family needs binarized outcomes".into());
        }
        Ok(())
    }

    /// The scenario before any binarization threshold is resolved.
    pub fn base_scenario(&self) -> Result<Scenario> {
        let s = &self.scenario;
        let mut scn = match s.preset {
            Some(id) => {
                if s.beta1.is_some() || s.beta2.is_some() || s.gamma.is_some() {
                    return Err(Error::Config("scenario: give either a preset or custom coefficients".into()));
                }
                let mut scn = Scenario::preset(id)?;
                if let Some(sd) = s.base_noise_sd {
                    scn.base_noise_sd = sd;
                }
                if let Some(mode) = s.mode {
                    scn.mode = mode;
                }
                scn
            }
            None => {
                let beta1 = s.beta1.clone().ok_or_else(|| Error::Config("scenario: missing beta1".into()))?;
                let k = beta1.len();
                Scenario::new(
                    beta1,
                    s.beta2.clone().unwrap_or_else(|| vec![0.0; k]),
                    s.gamma.clone().unwrap_or_else(|| vec![1.0; k]),
                    s.base_noise_sd.unwrap_or(1.0),
                    s.mode.unwrap_or(NoiseMode::Homoskedastic),
                )?
            }
        };
        if let Some(arms) = s.arms {
            scn = scn.truncated(arms)?;
        }
        scn.validate()?;
        Ok(scn)
    }

    pub fn scenario_label(&self) -> String {
        if let Some(l) = &self.scenario.label {
            return l.clone();
        }
        match (self.scenario.preset, self.scenario.arms) {
            (Some(id), Some(k)) => format!("preset{id}_k{k}"),
            (Some(id), None) => format!("preset{id}"),
            _ => "custom".into(),
        }
    }

    pub fn deployed_policy(&self) -> Policy {
        let mut p = Policy::new(self.policy);
        if let Some(f) = self.floor {
            p.floor = f;
        }
        p
    }

    pub fn eval_policy(&self, arms: usize) -> Result<ActionDistribution> {
        match &self.eval_policy {
            EvalPolicySpec::Uniform => ActionDistribution::unfloored(vec![1.0 / arms as f64; arms]),
            EvalPolicySpec::Fixed { probs } => {
                if probs.len() != arms {
                    return Err(Error::Config(format!("eval_policy has {} probabilities for {arms} arms", probs.len())));
                }
                ActionDistribution::unfloored(probs.clone())
            }
        }
    }

    pub fn build_pool(&self) -> Result<FeaturePool> {
        let (source, surrogate) = match &self.pool {
            PoolSpec::Synthetic { size, dim, seed, mean, variance } => (
                PoolSource::Synthetic { size: *size, dim: *dim, seed: *seed },
                Surrogate::ClosedForm { mean: mean.clone(), variance: variance.clone() },
            ),
            PoolSpec::Csv { path, feature_columns, outcome_column, k } => (
                PoolSource::Csv {
                    path: path.clone(),
                    feature_columns: feature_columns.clone(),
                    outcome_column: outcome_column.clone(),
                },
                Surrogate::Fitted { k: *k },
            ),
        };
        build_feature_pool(&source, &surrogate)
    }

    pub fn working_model(&self, arms: usize, context_dim: usize) -> Result<WorkingModel> {
        WorkingModel::new(self.model.family, self.model.features.clone(), arms, context_dim)
    }

    pub fn nuisance_config(&self, binarized: bool) -> NuisanceConfig {
        let (prior_mean, prior_second) = if binarized { (0.5, 0.5) } else { (0.0, 1.0) };
        NuisanceConfig {
            k: self.nuisance.k,
            cadence: self.nuisance.cadence,
            variance_floor: self.nuisance.variance_floor,
            prior_mean,
            prior_second,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
horizon = 1000
reps = 10
methods = ["ipw"]
scenario = { preset = 1 }
policy = { kind = "uniform" }
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.alpha, 0.2);
        assert_eq!(cfg.checkpoints, vec![500, 1000]);
        assert_eq!(cfg.split_ratio, 0.5);
        assert_eq!(cfg.model, ModelSpec::default());
        assert_eq!(cfg.pool, PoolSpec::default());
        assert_eq!(cfg.deployed_policy().floor, Policy::DEFAULT_FLOOR);
        assert_eq!(cfg.base_scenario().unwrap().arms, 8);
    }

    #[test]
    fn rejects_bad_configs() {
        let with = |extra: &str| parse_config(&format!("{MINIMAL}{extra}"));
        assert!(with("checkpoints = [2000]\n").is_err());
        assert!(with("bogus_key = 1\n").is_err());
        let no_methods = MINIMAL.replace(r#"methods = ["ipw"]"#, "methods = []");
        assert!(parse_config(&no_methods).is_err());
        let split = MINIMAL.replace(r#"methods = ["ipw"]"#, r#"methods = ["maipwm_splitting"]"#);
        assert!(parse_config(&format!("{split}split_ratio = 0.0\n")).is_err());
        assert!(parse_config(&split).is_ok());
    }

    #[test]
    fn parse_errors_carry_location() {
        let err = parse_config("horizon = \"x\"\n").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn custom_scenario_and_logistic_default() {
        let cfg = parse_config(
            r#"
horizon = 100
reps = 1
methods = ["maipwm_external"]
policy = { kind = "thompson" }
model = { family = "logistic" }
[scenario]
beta1 = [1.0, 1.0]
beta2 = [0.5, 0.5]
label = "tied"
"#,
        )
        .unwrap();
        assert_eq!(cfg.scenario.binarize, Some(Binarize::Keyword(AutoKeyword::Auto)));
        assert_eq!(cfg.scenario_label(), "tied");
        assert_eq!(cfg.deployed_policy().floor, 0.05);
    }
}

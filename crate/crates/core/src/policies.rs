//! Action-selection strategies that emit explicit action distributions.
//!
//! Every strategy is a pure function of the per-arm predicted mean and second
//! moment at the current context, plus (for Thompson sampling) a block of
//! common random normal draws fixed when the nuisance snapshot is frozen. That
//! makes the deployed propensity a deterministic, history-measurable map that
//! can be re-evaluated at arbitrary contexts when estimating score variances.

use std::sync::{Arc, OnceLock};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::{Context, FeaturePool};
use crate::error::{Error, Result};
use crate::mathkit::normal_quantile;
use crate::nuisance::MomentModel;

const SUM_TOL: f64 = 1e-10;

/// Probability simplex over arms with a guaranteed lower bound.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    probs: Vec<f64>,
    floor: f64,
}

impl ActionDistribution {
    /// Validates `probs` against `floor` (which may be zero for evaluation
    /// policies).
    pub fn new(probs: Vec<f64>, floor: f64) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidProbability("empty action distribution".into()));
        }
        if !(floor >= 0.0) || floor * probs.len() as f64 > 1.0 + SUM_TOL {
            return Err(Error::InvalidProbability(format!("floor {floor} infeasible for {} arms", probs.len())));
        }
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidProbability("non-finite probability".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidProbability(format!("probabilities sum to {sum}")));
        }
        if let Some((arm, p)) = probs.iter().enumerate().find(|(_, p)| **p < floor - SUM_TOL) {
            return Err(Error::FloorViolation { arm, prob: *p });
        }
        Ok(Self { probs, floor })
    }

    /// A distribution without a floor, e.g. an evaluation policy.
    pub fn unfloored(probs: Vec<f64>) -> Result<Self> {
        Self::new(probs, 0.0)
    }

    pub fn uniform(arms: usize) -> Self {
        Self { probs: vec![1.0 / arms as f64; arms], floor: 1.0 / arms as f64 }
    }

    pub fn arms(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, arm: usize) -> f64 {
        self.probs[arm]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    /// Inverse-CDF lookup of a uniform draw `u` in `[0, 1)`.
    pub fn arm_for_uniform(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (a, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        // Rounding left `u` past the last cumulative sum; take the last arm
        // with positive mass.
        self.probs.iter().rposition(|p| *p > 0.0).unwrap_or(self.probs.len() - 1)
    }
}

/// Draws an arm from `dist`.
pub fn sample_action<R: Rng + ?Sized>(dist: &ActionDistribution, rng: &mut R) -> usize {
    dist.arm_for_uniform(rng.random::<f64>())
}

/// Selection strategy and its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyKind {
    Uniform,
    EpsilonGreedy {
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
    /// Greedy on `f + z_{1-alpha/2} sqrt(e - f^2)`, mixed with uniform
    /// exploration at rate `explore`.
    Ucb {
        #[serde(default = "default_ucb_alpha")]
        alpha: f64,
        #[serde(default = "default_epsilon")]
        explore: f64,
    },
    /// Probability that each arm wins under independent
    /// `Normal(f, e - f^2)` draws, estimated from `draws` common random
    /// numbers and clipped into `[clip_low, clip_high]`.
    Thompson {
        #[serde(default = "default_clip_low")]
        clip_low: f64,
        #[serde(default = "default_clip_high")]
        clip_high: f64,
        #[serde(default = "default_draws")]
        draws: usize,
    },
}

fn default_epsilon() -> f64 {
    0.1
}
fn default_ucb_alpha() -> f64 {
    0.05
}
fn default_clip_low() -> f64 {
    0.05
}
fn default_clip_high() -> f64 {
    0.95
}
fn default_draws() -> usize {
    2000
}

impl PolicyKind {
    pub fn thompson() -> Self {
        Self::Thompson { clip_low: default_clip_low(), clip_high: default_clip_high(), draws: default_draws() }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::EpsilonGreedy { .. } => "epsilon_greedy",
            Self::Ucb { .. } => "ucb",
            Self::Thompson { .. } => "thompson",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let open_unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in (0,1), got {v}")))
            }
        };
        match *self {
            Self::Uniform => Ok(()),
            Self::EpsilonGreedy { epsilon } => open_unit("epsilon", epsilon),
            Self::Ucb { alpha, explore } => open_unit("alpha", alpha).and(open_unit("explore", explore)),
            Self::Thompson { clip_low, clip_high, draws } => {
                open_unit("clip_low", clip_low)?;
                open_unit("clip_high", clip_high)?;
                if clip_low >= clip_high {
                    return Err(Error::Config("clip_low must be below clip_high".into()));
                }
                if draws == 0 {
                    return Err(Error::Config("thompson draws must be positive".into()));
                }
                Ok(())
            }
        }
    }

    /// Monte Carlo draw count needed per frozen block.
    pub fn draws(&self) -> usize {
        match self {
            Self::Thompson { draws, .. } => *draws,
            _ => 0,
        }
    }
}

/// Standard normal draws shared by every Thompson evaluation in a block.
#[derive(Debug, Clone, PartialEq)]
pub struct CommonDraws {
    arms: usize,
    z: Vec<f64>,
}

impl CommonDraws {
    pub fn generate<R: Rng + ?Sized>(rng: &mut R, draws: usize, arms: usize) -> Self {
        let z = (0..draws * arms).map(|_| StandardNormal.sample(rng)).collect();
        Self { arms, z }
    }

    pub fn empty() -> Self {
        Self { arms: 0, z: Vec::new() }
    }

    pub fn count(&self) -> usize {
        self.z.len().checked_div(self.arms).unwrap_or(0)
    }
}

/// A strategy together with its propensity floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Policy {
    pub kind: PolicyKind,
    pub floor: f64,
}

impl Policy {
    pub const DEFAULT_FLOOR: f64 = 0.01;

    /// Uses the default floor, or the lower clip for Thompson sampling.
    pub fn new(kind: PolicyKind) -> Self {
        let floor = match kind {
            PolicyKind::Thompson { clip_low, .. } => clip_low,
            _ => Self::DEFAULT_FLOOR,
        };
        Self { kind, floor }
    }

    /// Action distribution for one context's predictions.
    pub fn action_probs(&self, f_pred: &[f64], e_pred: &[f64], draws: &CommonDraws) -> Result<ActionDistribution> {
        let k = f_pred.len();
        if e_pred.len() != k {
            return Err(Error::DimensionMismatch { expected: k, got: e_pred.len() });
        }
        if let Some(arm) = f_pred.iter().chain(e_pred).position(|v| v.is_nan()) {
            return Err(Error::NonFinitePrediction { arm: arm % k.max(1) });
        }
        if k == 0 {
            return Err(Error::InvalidProbability("no arms".into()));
        }
        if k == 1 {
            return ActionDistribution::new(vec![1.0], self.floor.min(1.0));
        }
        let kf = k as f64;
        let mut probs = match self.kind {
            PolicyKind::Uniform => vec![1.0 / kf; k],
            PolicyKind::EpsilonGreedy { epsilon } => {
                let best = argmax(f_pred);
                let mut p = vec![epsilon / (kf - 1.0); k];
                p[best] = 1.0 - epsilon;
                p
            }
            PolicyKind::Ucb { alpha, explore } => {
                let z = normal_quantile(1.0 - alpha / 2.0)?;
                let bounds: Vec<f64> = f_pred
                    .iter()
                    .zip(e_pred)
                    .map(|(f, e)| f + z * (e - f * f).max(0.0).sqrt())
                    .collect();
                let best = argmax(&bounds);
                let mut p = vec![explore / kf; k];
                p[best] += 1.0 - explore;
                p
            }
            PolicyKind::Thompson { .. } => thompson_probs(f_pred, e_pred, draws)?,
        };
        apply_floor(&mut probs, self.floor);
        ActionDistribution::new(probs, self.floor)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn thompson_probs(f_pred: &[f64], e_pred: &[f64], draws: &CommonDraws) -> Result<Vec<f64>> {
    let k = f_pred.len();
    if draws.arms != k || draws.count() == 0 {
        return Err(Error::Config(format!(
            "thompson sampling needs common draws for {k} arms, got {} x {}",
            draws.count(),
            draws.arms
        )));
    }
    let sd: Vec<f64> = f_pred.iter().zip(e_pred).map(|(f, e)| (e - f * f).max(0.0).sqrt()).collect();
    let mut wins = vec![0usize; k];
    for row in draws.z.chunks_exact(k) {
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for a in 0..k {
            let v = f_pred[a] + sd[a] * row[a];
            if v > best_val {
                best_val = v;
                best = a;
            }
        }
        wins[best] += 1;
    }
    let n = draws.count() as f64;
    Ok(wins.into_iter().map(|w| w as f64 / n).collect())
}

/// Raises entries below `floor` to `floor` and rescales the rest so the
/// vector still sums to one, repeating until every entry clears the floor.
pub fn apply_floor(probs: &mut [f64], floor: f64) {
    let k = probs.len();
    if floor <= 0.0 || k == 0 {
        return;
    }
    let raw = probs.to_vec();
    let mut pinned = vec![false; k];
    loop {
        let n_pinned = pinned.iter().filter(|p| **p).count();
        let free_mass = 1.0 - floor * n_pinned as f64;
        let free_raw: f64 = raw.iter().zip(&pinned).filter(|(_, p)| !**p).map(|(r, _)| r).sum();
        let n_free = k - n_pinned;
        let mut changed = false;
        for a in 0..k {
            if pinned[a] {
                probs[a] = floor;
                continue;
            }
            probs[a] = if free_raw > 0.0 { raw[a] * free_mass / free_raw } else { free_mass / n_free as f64 };
            if probs[a] < floor {
                pinned[a] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
}

/// A policy bound to a frozen nuisance snapshot and its Thompson draws: the
/// propensity map in force for one retrain block.
///
/// Distributions at pool rows are memoized, so a block's propensities are
/// computed at most once per row however often they are queried.
#[derive(Clone)]
pub struct FrozenPolicy {
    pub policy: Policy,
    pub model: Arc<dyn MomentModel + Send>,
    pub draws: Arc<CommonDraws>,
    sites: Option<Arc<[Arc<[f64]>]>>,
    memo: Arc<[OnceLock<ActionDistribution>]>,
}

impl std::fmt::Debug for FrozenPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrozenPolicy").field("policy", &self.policy).finish_non_exhaustive()
    }
}

impl FrozenPolicy {
    pub fn new(policy: Policy, model: Arc<dyn MomentModel + Send>, draws: Arc<CommonDraws>) -> Self {
        Self { policy, model, draws, sites: None, memo: Arc::from(Vec::new()) }
    }

    /// Enables memoization for contexts taken from `pool`.
    pub fn with_pool(mut self, pool: &FeaturePool) -> Self {
        let sites: Vec<Arc<[f64]>> = (0..pool.len()).map(|i| pool.context(i).features).collect();
        self.memo = (0..sites.len()).map(|_| OnceLock::new()).collect();
        self.sites = Some(sites.into());
        self
    }

    pub fn probs(&self, ctx: &Context) -> Result<ActionDistribution> {
        if let Some(sites) = &self.sites {
            if let Some(site) = sites.get(ctx.pool_index) {
                if Arc::ptr_eq(site, &ctx.features) || **site == *ctx.features {
                    let slot = &self.memo[ctx.pool_index];
                    if let Some(d) = slot.get() {
                        return Ok(d.clone());
                    }
                    let d = self.compute(ctx)?;
                    return Ok(slot.get_or_init(|| d).clone());
                }
            }
        }
        self.compute(ctx)
    }

    fn compute(&self, ctx: &Context) -> Result<ActionDistribution> {
        let (f, e) = self.model.predict_all(ctx);
        self.policy.action_probs(&f, &e, &self.draws)
    }
}

//! Semi-synthetic bandit environment.
//!
//! Contexts are drawn with replacement from a finite [`FeaturePool`]. Each pool
//! row carries a surrogate mean `f(x)` and variance scale `v(x)`; a
//! [`Scenario`] turns those into arm-specific outcome distributions
//!
//! ```text
//! E[Y | x, a]   = beta1[a] + beta2[a] * f(x)
//! Var[Y | x, a] = base_noise_sd^2            (homoskedastic)
//!               = gamma[a] * v(x)            (heteroskedastic)
//! ```
//!
//! Arms are zero-based throughout the crate.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nuisance::NeighborIndex;

/// One observed context: its feature vector and the pool row it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    pub features: Arc<[f64]>,
    pub pool_index: usize,
}

impl Context {
    pub fn new(features: impl Into<Arc<[f64]>>, pool_index: usize) -> Self {
        Self { features: features.into(), pool_index }
    }
}

/// Closed-form surrogate functions of the feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SurrogateFn {
    Constant { value: f64 },
    /// `x[index]`
    Coordinate { index: usize },
    /// `sin(x[index])`
    Sine { index: usize },
    /// `Σ w_i x_i`
    Linear { weights: Vec<f64> },
    /// `offset + x[index]^2`
    Quadratic { offset: f64, index: usize },
    /// `scale * exp(rate * x[index])`
    Exponential { scale: f64, rate: f64, index: usize },
}

impl SurrogateFn {
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        let coord = |i: usize| {
            x.get(i)
                .copied()
                .ok_or_else(|| Error::Ingestion(format!("feature index {i} out of range for dimension {}", x.len())))
        };
        Ok(match self {
            Self::Constant { value } => *value,
            Self::Coordinate { index } => coord(*index)?,
            Self::Sine { index } => coord(*index)?.sin(),
            Self::Linear { weights } => {
                if weights.len() != x.len() {
                    return Err(Error::DimensionMismatch { expected: x.len(), got: weights.len() });
                }
                weights.iter().zip(x).map(|(w, v)| w * v).sum()
            }
            Self::Quadratic { offset, index } => offset + coord(*index)?.powi(2),
            Self::Exponential { scale, rate, index } => scale * (rate * coord(*index)?).exp(),
        })
    }
}

/// Where the pool's feature rows come from.
#[derive(Debug, Clone, PartialEq)]
pub enum PoolSource {
    /// `size` rows of `dim` independent standard normal coordinates.
    Synthetic { size: usize, dim: usize, seed: u64 },
    Csv { path: PathBuf, feature_columns: Vec<String>, outcome_column: String },
}

/// How the per-row surrogate mean and variance scale are obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum Surrogate {
    ClosedForm { mean: SurrogateFn, variance: SurrogateFn },
    /// Nearest-neighbor fit of the CSV outcome (mean) and of the squared
    /// residual (variance scale).
    Fitted { k: usize },
}

/// Finite population of contexts with surrogate moments.
#[derive(Debug, Clone)]
pub struct FeaturePool {
    rows: Vec<Arc<[f64]>>,
    f_base: Vec<f64>,
    v_base: Vec<f64>,
}

impl FeaturePool {
    pub fn new(rows: Vec<Vec<f64>>, f_base: Vec<f64>, v_base: Vec<f64>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyPool);
        }
        if f_base.len() != rows.len() || v_base.len() != rows.len() {
            return Err(Error::Ingestion(format!(
                "{} rows but {} means and {} variances",
                rows.len(),
                f_base.len(),
                v_base.len()
            )));
        }
        let dim = rows[0].len();
        if dim == 0 {
            return Err(Error::Ingestion("feature rows must have at least one column".into()));
        }
        if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, got: rows[bad].len() });
        }
        if rows.iter().flatten().chain(&f_base).chain(&v_base).any(|v| !v.is_finite()) {
            return Err(Error::Ingestion("non-finite value in pool".into()));
        }
        if let Some(v) = v_base.iter().find(|v| **v < 0.0) {
            return Err(Error::Ingestion(format!("negative variance scale {v}")));
        }
        Ok(Self { rows: rows.into_iter().map(Arc::from).collect(), f_base, v_base })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn context(&self, index: usize) -> Context {
        Context { features: Arc::clone(&self.rows[index]), pool_index: index }
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.iter().map(|r| &r[..])
    }

    pub fn f_base(&self) -> &[f64] {
        &self.f_base
    }

    pub fn v_base(&self) -> &[f64] {
        &self.v_base
    }

    pub fn contexts(&self) -> impl Iterator<Item = Context> + '_ {
        (0..self.len()).map(|i| self.context(i))
    }
}

/// Builds a feature pool; deterministic given the source's seed.
pub fn build_feature_pool(source: &PoolSource, surrogate: &Surrogate) -> Result<FeaturePool> {
    let (rows, outcome) = match source {
        PoolSource::Synthetic { size, dim, seed } => {
            if *size == 0 {
                return Err(Error::EmptyPool);
            }
            if *dim == 0 {
                return Err(Error::Ingestion("synthetic pool needs dim >= 1".into()));
            }
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(*seed);
            let rows: Vec<Vec<f64>> = (0..*size)
                .map(|_| (0..*dim).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect();
            (rows, None)
        }
        PoolSource::Csv { path, feature_columns, outcome_column } => {
            let (rows, y) = read_csv(path, feature_columns, outcome_column)?;
            (rows, Some(y))
        }
    };
    let (f_base, v_base) = match surrogate {
        Surrogate::ClosedForm { mean, variance } => {
            let f = rows.iter().map(|r| mean.eval(r)).collect::<Result<Vec<_>>>()?;
            let v = rows.iter().map(|r| variance.eval(r)).collect::<Result<Vec<_>>>()?;
            (f, v)
        }
        Surrogate::Fitted { k } => {
            let y = outcome.ok_or_else(|| {
                Error::Ingestion("fitted surrogate needs a CSV source with an outcome column".into())
            })?;
            fit_surrogate(&rows, &y, *k)?
        }
    };
    FeaturePool::new(rows, f_base, v_base)
}

fn fit_surrogate(rows: &[Vec<f64>], y: &[f64], k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let index = NeighborIndex::new(rows)?;
    let f = index.smooth(y, k);
    let resid: Vec<f64> = y.iter().zip(&f).map(|(y, f)| (y - f).powi(2)).collect();
    let v = index.smooth(&resid, k);
    Ok((f, v))
}

fn read_csv(path: &Path, feature_columns: &[String], outcome_column: &str) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let file = File::open(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|source| Error::Csv { path: path.to_path_buf(), source })?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Ingestion(format!("{}: missing column '{name}'", path.display())))
    };
    let feature_idx = feature_columns.iter().map(|c| column(c)).collect::<Result<Vec<_>>>()?;
    if feature_idx.is_empty() {
        return Err(Error::Ingestion("no feature columns selected".into()));
    }
    let outcome_idx = column(outcome_column)?;

    let mut rows = Vec::new();
    let mut y = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // Header is line 1.
        let line = i + 2;
        let record = record.map_err(|source| Error::Csv { path: path.to_path_buf(), source })?;
        let cell = |j: usize| -> Result<f64> {
            let raw = record.get(j).map(str::trim).unwrap_or("");
            if raw.is_empty() {
                return Err(Error::Ingestion(format!("{} line {line}: missing cell in column {}", path.display(), j + 1)));
            }
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Ingestion(format!("{} line {line}: non-numeric cell '{raw}'", path.display())))
        };
        rows.push(feature_idx.iter().map(|&j| cell(j)).collect::<Result<Vec<_>>>()?);
        y.push(cell(outcome_idx)?);
    }
    if rows.is_empty() {
        return Err(Error::EmptyPool);
    }
    Ok((rows, y))
}

/// Draws a context uniformly with replacement from the pool.
pub fn sample_context<R: Rng + ?Sized>(pool: &FeaturePool, rng: &mut R) -> Result<Context> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    Ok(pool.context(rng.random_range(0..pool.len())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Homoskedastic,
    Heteroskedastic,
}

/// Generative outcome model over `arms` arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub arms: usize,
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    pub gamma: Vec<f64>,
    pub base_noise_sd: f64,
    pub mode: NoiseMode,
    #[serde(default)]
    pub binarize_threshold: Option<f64>,
}

impl Scenario {
    pub fn new(
        beta1: Vec<f64>,
        beta2: Vec<f64>,
        gamma: Vec<f64>,
        base_noise_sd: f64,
        mode: NoiseMode,
    ) -> Result<Self> {
        let scn = Self { arms: beta1.len(), beta1, beta2, gamma, base_noise_sd, mode, binarize_threshold: None };
        scn.validate()?;
        Ok(scn)
    }

    /// The four preset scenarios, with eight arms each.
    pub fn preset(id: u8) -> Result<Self> {
        let beta1 = vec![0.0, 0.0, 1.0, 2.0, 2.0, 3.0, 4.0, 5.0];
        let beta2 = vec![1.0, 2.0, 3.0, 4.0, 5.0, 5.0, 5.0, 5.0];
        match id {
            1 => Self::new(beta1, beta2, vec![1.0; 8], 1.0, NoiseMode::Homoskedastic),
            2 => Self::new(beta1, beta2, vec![0.2; 8], 1.0, NoiseMode::Heteroskedastic),
            3 => Self::new(
                beta1,
                beta2,
                [1.0, 2.0, 3.0, 4.0, 5.0, 5.0, 5.0, 5.0].iter().map(|g| g * 0.2).collect(),
                1.0,
                NoiseMode::Heteroskedastic,
            ),
            4 => Self::new(beta1, vec![0.0; 8], vec![1.0; 8], 1.0, NoiseMode::Homoskedastic),
            _ => Err(Error::Config(format!("unknown scenario id {id} (expected 1-4)"))),
        }
    }

    /// Keeps only the first `arms` arms.
    pub fn truncated(mut self, arms: usize) -> Result<Self> {
        if arms == 0 || arms > self.arms {
            return Err(Error::Config(format!("cannot truncate {} arms to {arms}", self.arms)));
        }
        self.arms = arms;
        self.beta1.truncate(arms);
        self.beta2.truncate(arms);
        self.gamma.truncate(arms);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.arms;
        if k == 0 || self.beta1.len() != k || self.beta2.len() != k || self.gamma.len() != k {
            return Err(Error::Config(format!(
                "scenario vectors must all have {k} entries (beta1 {}, beta2 {}, gamma {})",
                self.beta1.len(),
                self.beta2.len(),
                self.gamma.len()
            )));
        }
        if self.beta1.iter().chain(&self.beta2).chain(&self.gamma).any(|v| !v.is_finite()) {
            return Err(Error::Config("scenario values must be finite".into()));
        }
        match self.mode {
            NoiseMode::Homoskedastic if !(self.base_noise_sd > 0.0) => {
                Err(Error::Config("base_noise_sd must be positive".into()))
            }
            NoiseMode::Heteroskedastic if self.gamma.iter().any(|g| !(*g > 0.0)) => {
                Err(Error::Config("gamma entries must be positive in heteroskedastic mode".into()))
            }
            _ => Ok(()),
        }
    }

    fn check_arm(&self, arm: usize) -> Result<()> {
        if arm >= self.arms {
            return Err(Error::ArmOutOfRange { arm, arms: self.arms });
        }
        Ok(())
    }

    /// `E[Y | x, a]` before any binarization.
    pub fn outcome_mean(&self, ctx: &Context, arm: usize, pool: &FeaturePool) -> Result<f64> {
        self.check_arm(arm)?;
        Ok(self.beta1[arm] + self.beta2[arm] * pool.f_base[ctx.pool_index])
    }

    /// `Var[Y | x, a]` before any binarization.
    pub fn outcome_variance(&self, ctx: &Context, arm: usize, pool: &FeaturePool) -> Result<f64> {
        self.check_arm(arm)?;
        let var = match self.mode {
            NoiseMode::Homoskedastic => self.base_noise_sd.powi(2),
            NoiseMode::Heteroskedastic => self.gamma[arm] * pool.v_base[ctx.pool_index],
        };
        if !(var > 0.0) || !var.is_finite() {
            return Err(Error::DegenerateNoise(var));
        }
        Ok(var)
    }

    /// Outcome for a given standard normal noise draw.
    pub fn outcome_from_noise(&self, ctx: &Context, arm: usize, pool: &FeaturePool, noise: f64) -> Result<f64> {
        let mean = self.outcome_mean(ctx, arm, pool)?;
        let sd = self.outcome_variance(ctx, arm, pool)?.sqrt();
        Ok(mean + sd * noise)
    }

    /// The outcome the working model sees: raw, or thresholded when a
    /// binarization threshold is set.
    pub fn observed_outcome(&self, ctx: &Context, arm: usize, pool: &FeaturePool, noise: f64) -> Result<f64> {
        let y = self.outcome_from_noise(ctx, arm, pool, noise)?;
        Ok(match self.binarize_threshold {
            Some(thr) => binarize_outcome(y, thr),
            None => y,
        })
    }

    /// Mean and second moment of the observed outcome at `(x, a)`.
    pub fn observed_moments(&self, ctx: &Context, arm: usize, pool: &FeaturePool) -> Result<(f64, f64)> {
        let mean = self.outcome_mean(ctx, arm, pool)?;
        let var = self.outcome_variance(ctx, arm, pool)?;
        Ok(match self.binarize_threshold {
            Some(thr) => {
                let p = 1.0 - crate::mathkit::normal_cdf((thr - mean) / var.sqrt());
                (p, p)
            }
            None => (mean, var + mean * mean),
        })
    }

    /// Population mean of the raw outcome when arms are drawn from `arm_probs`.
    pub fn population_mean(&self, pool: &FeaturePool, arm_probs: &[f64]) -> Result<f64> {
        if arm_probs.len() != self.arms {
            return Err(Error::DimensionMismatch { expected: self.arms, got: arm_probs.len() });
        }
        let mut total = 0.0;
        for ctx in pool.contexts() {
            for (a, p) in arm_probs.iter().enumerate() {
                total += p * self.outcome_mean(&ctx, a, pool)?;
            }
        }
        Ok(total / pool.len() as f64)
    }
}

/// Gaussian outcome draw for arm `arm` at context `ctx`.
pub fn sample_outcome<R: Rng + ?Sized>(
    scn: &Scenario,
    ctx: &Context,
    arm: usize,
    pool: &FeaturePool,
    rng: &mut R,
) -> Result<f64> {
    let noise: f64 = StandardNormal.sample(rng);
    scn.outcome_from_noise(ctx, arm, pool, noise)
}

/// `1` when `y` is strictly above `threshold`, else `0`.
pub fn binarize_outcome(y: f64, threshold: f64) -> f64 {
    if y > threshold {
        1.0
    } else {
        0.0
    }
}

/// Routing coin for sequential sample splitting: `true` sends the round to
/// the second (feature-pool) history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SplitFlag(pub bool);

impl SplitFlag {
    pub fn zeta(self) -> u8 {
        u8::from(self.0)
    }
}

/// Bernoulli(`r`) split draw. The caller must pass an RNG reserved for
/// splitting so the coin stays independent of both histories.
pub fn assign_split<R: Rng + ?Sized>(rng: &mut R, r: f64) -> Result<SplitFlag> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::InvalidProbability(format!("split ratio must be in (0,1), got {r}")));
    }
    Ok(SplitFlag(rng.random::<f64>() < r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn closed_form(size: usize, mean: SurrogateFn) -> FeaturePool {
        build_feature_pool(
            &PoolSource::Synthetic { size, dim: 3, seed: 7 },
            &Surrogate::ClosedForm { mean, variance: SurrogateFn::Constant { value: 1.0 } },
        )
        .unwrap()
    }

    #[test]
    fn closed_form_passthrough() {
        let pool = closed_form(100, SurrogateFn::Coordinate { index: 0 });
        assert_eq!(pool.len(), 100);
        for (row, f) in pool.rows().zip(pool.f_base()) {
            assert_eq!(row[0], *f);
        }
        assert!(pool.v_base().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn synthetic_pool_is_deterministic() {
        let a = closed_form(10, SurrogateFn::Sine { index: 1 });
        let b = closed_form(10, SurrogateFn::Sine { index: 1 });
        assert!(a.rows().zip(b.rows()).all(|(x, y)| x == y));
    }

    #[test]
    fn empty_pool_rejected() {
        let err = build_feature_pool(
            &PoolSource::Synthetic { size: 0, dim: 2, seed: 1 },
            &Surrogate::ClosedForm { mean: SurrogateFn::Constant { value: 0.0 }, variance: SurrogateFn::Constant { value: 1.0 } },
        );
        assert!(matches!(err, Err(Error::EmptyPool)));
    }

    #[test]
    fn single_row_pool_always_returns_it() {
        let pool = FeaturePool::new(vec![vec![1.5, 2.5]], vec![0.0], vec![1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let ctx = sample_context(&pool, &mut rng).unwrap();
            assert_eq!(ctx.pool_index, 0);
            assert_eq!(&ctx.features[..], &[1.5, 2.5]);
        }
    }

    #[test]
    fn two_row_pool_is_balanced() {
        let pool = FeaturePool::new(vec![vec![0.0], vec![1.0]], vec![0.0; 2], vec![1.0; 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let ones = (0..n).filter(|_| sample_context(&pool, &mut rng).unwrap().pool_index == 1).count();
        assert!((ones as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn context_draws_reproducible() {
        let pool = closed_form(50, SurrogateFn::Constant { value: 0.0 });
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..30).map(|_| sample_context(&pool, &mut rng).unwrap().pool_index).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
    }

    #[test]
    fn preset_means() {
        let pool = FeaturePool::new(vec![vec![0.3]], vec![2.0], vec![1.0]).unwrap();
        let ctx = pool.context(0);
        // Scenario 4 has no context dependence; third arm has beta1 = 1.
        let s4 = Scenario::preset(4).unwrap();
        assert_eq!(s4.outcome_mean(&ctx, 2, &pool).unwrap(), 1.0);

        let zero = FeaturePool::new(vec![vec![0.3]], vec![0.0], vec![1.0]).unwrap();
        let s1 = Scenario::preset(1).unwrap();
        let c0 = zero.context(0);
        assert_eq!(s1.outcome_mean(&c0, 0, &zero).unwrap(), 0.0);
        assert_eq!(s1.outcome_mean(&c0, 1, &zero).unwrap(), 0.0);
        assert!(matches!(s1.outcome_mean(&c0, 8, &zero), Err(Error::ArmOutOfRange { .. })));

        let custom = Scenario::new(vec![0.0], vec![1.0], vec![1.0], 1.0, NoiseMode::Homoskedastic).unwrap();
        assert_eq!(custom.outcome_mean(&ctx, 0, &pool).unwrap(), 2.0);
    }

    #[test]
    fn presets_have_eight_arms() {
        for id in 1..=4 {
            let s = Scenario::preset(id).unwrap();
            assert_eq!(s.arms, 8);
            s.validate().unwrap();
        }
        assert!(Scenario::preset(5).is_err());
        let s = Scenario::preset(3).unwrap();
        assert!((s.gamma[4] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn heteroskedastic_noise_scale() {
        let pool = FeaturePool::new(vec![vec![0.0]], vec![1.0], vec![0.2]).unwrap();
        let scn = Scenario::new(vec![0.0], vec![1.0], vec![0.2], 1.0, NoiseMode::Heteroskedastic).unwrap();
        let ctx = pool.context(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let ys: Vec<f64> = (0..n).map(|_| sample_outcome(&scn, &ctx, 0, &pool, &mut rng).unwrap()).collect();
        let mean = ys.iter().sum::<f64>() / n as f64;
        let sd = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((sd - 0.2).abs() < 0.005, "sd={sd}");
        assert!((mean - 1.0).abs() < 3.0 * 0.2 / (n as f64).sqrt());
    }

    #[test]
    fn homoskedastic_unit_variance() {
        let pool = FeaturePool::new(vec![vec![0.0]], vec![0.5], vec![1.0]).unwrap();
        let scn = Scenario::preset(1).unwrap();
        let ctx = pool.context(0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let ys: Vec<f64> = (0..n).map(|_| sample_outcome(&scn, &ctx, 3, &pool, &mut rng).unwrap()).collect();
        let mean = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 1.0).abs() < 0.02, "var={var}");
        let truth = scn.outcome_mean(&ctx, 3, &pool).unwrap();
        assert!((mean - truth).abs() < 3.0 / (n as f64).sqrt());
    }

    #[test]
    fn zero_variance_is_degenerate() {
        let pool = FeaturePool::new(vec![vec![0.0]], vec![1.0], vec![0.0]).unwrap();
        let scn = Scenario::new(vec![0.0], vec![1.0], vec![0.2], 1.0, NoiseMode::Heteroskedastic).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            sample_outcome(&scn, &pool.context(0), 0, &pool, &mut rng),
            Err(Error::DegenerateNoise(_))
        ));
    }

    #[test]
    fn binarize_is_strict() {
        assert_eq!(binarize_outcome(2.0, 1.0), 1.0);
        assert_eq!(binarize_outcome(1.0, 1.0), 0.0);
    }

    #[test]
    fn binarized_rate_matches_closed_form() {
        let pool = closed_form(200, SurrogateFn::Sine { index: 0 });
        let scn = Scenario::preset(1).unwrap().truncated(2).unwrap();
        let thr = scn.population_mean(&pool, &[0.5, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let mut ones = 0.0;
        let mut exact = 0.0;
        for i in 0..n {
            let ctx = sample_context(&pool, &mut rng).unwrap();
            let arm = i % 2;
            ones += binarize_outcome(sample_outcome(&scn, &ctx, arm, &pool, &mut rng).unwrap(), thr);
            let mut b = scn.clone();
            b.binarize_threshold = Some(thr);
            exact += b.observed_moments(&ctx, arm, &pool).unwrap().0;
        }
        let (ones, exact) = (ones / n as f64, exact / n as f64);
        assert!((ones - exact).abs() < 4.0 * (0.25 / n as f64).sqrt(), "{ones} vs {exact}");
    }

    #[test]
    fn split_coin_frequency_and_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let ones = (0..n).filter(|_| assign_split(&mut rng, 0.5).unwrap().0).count();
        assert!((ones as f64 / n as f64 - 0.5).abs() < 0.01);
        assert!(assign_split(&mut rng, 0.0).is_err());
        assert!(assign_split(&mut rng, 1.0).is_err());
    }
}

//! Online nearest-neighbor regressors for the conditional first and second
//! moments of the outcome, one per arm.
//!
//! Training points are keyed by the feature-pool row ("site") they were
//! observed at, so a neighbor query is a walk over sites sorted by distance,
//! accumulating per-site counts until at least `k` points are covered. All
//! points tied with the last included distance are kept, which makes the fit a
//! deterministic function of the training multiset.
//!
//! [`NuisanceState`] ingests observations in time order and retrains at a fixed
//! cadence; every retrain freezes an immutable [`NuisanceSnapshot`]. A snapshot
//! taken at time `t` only ever sees observations with index `< t`.

use std::borrow::Cow;
use std::sync::{Arc, OnceLock};

use crate::env::{Context, FeaturePool, Scenario};
use crate::error::{Error, Result};

/// Pools up to this size get their full neighbor orderings precomputed.
const PRECOMPUTE_LIMIT: usize = 1024;

/// Conditional moments of the outcome given a context and an arm.
pub trait MomentModel: Sync {
    fn arms(&self) -> usize;
    /// Estimate of `E[Y | x, a]`.
    fn mean(&self, ctx: &Context, arm: usize) -> f64;
    /// Estimate of `E[Y^2 | x, a]`.
    fn second_moment(&self, ctx: &Context, arm: usize) -> f64;

    /// First time index whose observation the model may not have seen.
    fn snapshot_time(&self) -> usize {
        0
    }

    /// True for a learner that has not seen any data yet and only returns
    /// its prior.
    fn is_untrained(&self) -> bool {
        false
    }

    fn predict_all(&self, ctx: &Context) -> (Vec<f64>, Vec<f64>) {
        (0..self.arms()).map(|a| (self.mean(ctx, a), self.second_moment(ctx, a))).unzip()
    }
}

/// Exact moments of a scenario on its pool.
#[derive(Debug, Clone, Copy)]
pub struct ScenarioMoments<'a> {
    pub scenario: &'a Scenario,
    pub pool: &'a FeaturePool,
}

impl MomentModel for ScenarioMoments<'_> {
    fn arms(&self) -> usize {
        self.scenario.arms
    }

    fn mean(&self, ctx: &Context, arm: usize) -> f64 {
        self.scenario.observed_moments(ctx, arm, self.pool).map(|m| m.0).unwrap_or(f64::NAN)
    }

    fn second_moment(&self, ctx: &Context, arm: usize) -> f64 {
        self.scenario.observed_moments(ctx, arm, self.pool).map(|m| m.1).unwrap_or(f64::NAN)
    }
}

/// Standardized feature rows with (optionally precomputed) neighbor orders.
#[derive(Debug)]
pub struct NeighborIndex {
    rows: Vec<Vec<f64>>,
    center: Vec<f64>,
    scale: Vec<f64>,
    orders: Option<Vec<Vec<(u32, f32)>>>,
}

impl NeighborIndex {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyPool);
        }
        let dim = rows[0].len();
        let n = rows.len() as f64;
        let center: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..dim)
            .map(|j| {
                let var = rows.iter().map(|r| (r[j] - center[j]).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let std_rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().enumerate().map(|(j, v)| (v - center[j]) / scale[j]).collect())
            .collect();
        let mut index = Self { rows: std_rows, center, scale, orders: None };
        if rows.len() <= PRECOMPUTE_LIMIT {
            let orders = (0..rows.len()).map(|i| index.order_from(&index.rows[i])).collect();
            index.orders = Some(orders);
        }
        Ok(index)
    }

    pub fn from_pool(pool: &FeaturePool) -> Result<Self> {
        let rows: Vec<Vec<f64>> = pool.rows().map(<[f64]>::to_vec).collect();
        Self::new(&rows)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(j, v)| (v - self.center[j]) / self.scale[j]).collect()
    }

    fn order_from(&self, q: &[f64]) -> Vec<(u32, f32)> {
        let mut order: Vec<(u32, f32)> = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let d: f64 = r.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum();
                (i as u32, d as f32)
            })
            .collect();
        order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        order
    }

    /// Sites sorted by distance from `ctx`, nearest first.
    fn order_for(&self, ctx: &Context) -> Cow<'_, [(u32, f32)]> {
        if let Some(orders) = &self.orders {
            if self.is_site(ctx) {
                return Cow::Borrowed(&orders[ctx.pool_index]);
            }
        }
        Cow::Owned(self.order_from(&self.standardize(&ctx.features)))
    }

    fn is_site(&self, ctx: &Context) -> bool {
        ctx.pool_index < self.rows.len()
            && ctx.features.len() == self.center.len()
            && self.standardize(&ctx.features) == self.rows[ctx.pool_index]
    }

    /// Nearest-neighbor average of one value per row, evaluated at every row.
    pub fn smooth(&self, values: &[f64], k: usize) -> Vec<f64> {
        let agg: Vec<SiteAgg> = values.iter().map(|&y| SiteAgg { count: 1, sum: y, sum_sq: y * y }).collect();
        (0..self.len())
            .map(|i| {
                let order = match &self.orders {
                    Some(o) => Cow::Borrowed(&o[i][..]),
                    None => Cow::Owned(self.order_from(&self.rows[i])),
                };
                let acc = walk(&order, &agg, k);
                acc.sum / acc.count as f64
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct SiteAgg {
    count: u32,
    sum: f64,
    sum_sq: f64,
}

impl SiteAgg {
    fn add(&mut self, y: f64) {
        self.count += 1;
        self.sum += y;
        self.sum_sq += y * y;
    }
}

fn walk(order: &[(u32, f32)], agg: &[SiteAgg], k: usize) -> SiteAgg {
    let mut acc = SiteAgg::default();
    let mut boundary: Option<f32> = None;
    for &(site, dist) in order {
        if let Some(b) = boundary {
            if dist > b {
                break;
            }
        }
        let s = agg[site as usize];
        if s.count == 0 {
            continue;
        }
        acc.count += s.count;
        acc.sum += s.sum;
        acc.sum_sq += s.sum_sq;
        if boundary.is_none() && acc.count as usize >= k {
            boundary = Some(dist);
        }
    }
    acc
}

/// Learner settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NuisanceConfig {
    pub k: usize,
    /// Retrain after every `cadence` ingested observations.
    pub cadence: usize,
    pub variance_floor: f64,
    pub prior_mean: f64,
    pub prior_second: f64,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self { k: 25, cadence: 100, variance_floor: 1e-4, prior_mean: 0.0, prior_second: 1.0 }
    }
}

/// Frozen per-arm training data with cached predictions at pool sites.
#[derive(Debug)]
pub struct NuisanceSnapshot {
    time: usize,
    arms: usize,
    config: NuisanceConfig,
    index: Arc<NeighborIndex>,
    /// `agg[arm][site]`
    agg: Vec<Vec<SiteAgg>>,
    table: OnceLock<Vec<(f64, f64)>>,
}

impl NuisanceSnapshot {
    /// First time index whose observation is *not* included.
    pub fn snapshot_time(&self) -> usize {
        self.time
    }

    pub fn config(&self) -> &NuisanceConfig {
        &self.config
    }

    /// Number of training points for `arm`.
    pub fn arm_count(&self, arm: usize) -> usize {
        self.agg[arm].iter().map(|s| s.count as usize).sum()
    }

    fn raw_predict(&self, order: &[(u32, f32)], arm: usize) -> (f64, f64) {
        let acc = walk(order, &self.agg[arm], self.config.k);
        let (mean, second) = if acc.count == 0 {
            (self.config.prior_mean, self.config.prior_second)
        } else {
            let n = acc.count as f64;
            (acc.sum / n, acc.sum_sq / n)
        };
        (mean, second.max(mean * mean + self.config.variance_floor))
    }

    fn table(&self) -> &[(f64, f64)] {
        self.table.get_or_init(|| {
            let orders = self.index.orders.as_ref().expect("table only used with precomputed orders");
            let mut out = Vec::with_capacity(orders.len() * self.arms);
            for order in orders {
                for arm in 0..self.arms {
                    out.push(self.raw_predict(order, arm));
                }
            }
            out
        })
    }

    /// `(mean, second moment)` for one arm.
    pub fn predict(&self, ctx: &Context, arm: usize) -> (f64, f64) {
        if self.index.orders.is_some() && self.index.is_site(ctx) {
            return self.table()[ctx.pool_index * self.arms + arm];
        }
        self.raw_predict(&self.index.order_for(ctx), arm)
    }

    pub fn predict_mean(&self, ctx: &Context, arm: usize) -> f64 {
        self.predict(ctx, arm).0
    }

    pub fn predict_second_moment(&self, ctx: &Context, arm: usize) -> f64 {
        self.predict(ctx, arm).1
    }
}

impl MomentModel for NuisanceSnapshot {
    fn arms(&self) -> usize {
        self.arms
    }

    fn snapshot_time(&self) -> usize {
        self.time
    }

    fn is_untrained(&self) -> bool {
        (0..self.arms).all(|a| self.arm_count(a) == 0)
    }

    fn mean(&self, ctx: &Context, arm: usize) -> f64 {
        self.predict_mean(ctx, arm)
    }

    fn second_moment(&self, ctx: &Context, arm: usize) -> f64 {
        self.predict_second_moment(ctx, arm)
    }

    fn predict_all(&self, ctx: &Context) -> (Vec<f64>, Vec<f64>) {
        if self.index.orders.is_some() && self.index.is_site(ctx) {
            let row = &self.table()[ctx.pool_index * self.arms..(ctx.pool_index + 1) * self.arms];
            return row.iter().copied().unzip();
        }
        let order = self.index.order_for(ctx);
        (0..self.arms).map(|a| self.raw_predict(&order, a)).unzip()
    }
}

#[derive(Debug, Clone, Copy)]
struct Stored {
    t: usize,
    site: u32,
    y: f64,
}

/// Single-writer online learner producing snapshots at a fixed cadence.
#[derive(Debug)]
pub struct NuisanceState {
    config: NuisanceConfig,
    arms: usize,
    index: Arc<NeighborIndex>,
    log: Vec<(usize, Stored)>,
    running: Vec<Vec<SiteAgg>>,
    rebuilds: usize,
    current: Arc<NuisanceSnapshot>,
}

impl NuisanceState {
    pub fn new(arms: usize, index: Arc<NeighborIndex>, config: NuisanceConfig) -> Result<Self> {
        if config.k == 0 || config.cadence == 0 {
            return Err(Error::Config("nuisance k and cadence must be positive".into()));
        }
        if !(config.variance_floor > 0.0) {
            return Err(Error::Config("variance_floor must be positive".into()));
        }
        let running = vec![vec![SiteAgg::default(); index.len()]; arms];
        let current = Arc::new(NuisanceSnapshot {
            time: 1,
            arms,
            config,
            index: Arc::clone(&index),
            agg: running.clone(),
            table: OnceLock::new(),
        });
        Ok(Self { config, arms, index, log: Vec::new(), running, rebuilds: 0, current })
    }

    pub fn len(&self) -> usize {
        self.log.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log.is_empty()
    }

    /// Number of retrains triggered so far.
    pub fn rebuilds(&self) -> usize {
        self.rebuilds
    }

    /// Latest retrained snapshot (the one a policy may act on).
    pub fn current(&self) -> &Arc<NuisanceSnapshot> {
        &self.current
    }

    /// Appends observation `t` for `arm`. Returns `true` when this update
    /// triggered a retrain.
    pub fn update(&mut self, t: usize, ctx: &Context, arm: usize, y: f64) -> Result<bool> {
        if arm >= self.arms {
            return Err(Error::ArmOutOfRange { arm, arms: self.arms });
        }
        if let Some((_, last)) = self.log.last() {
            if t <= last.t {
                return Err(Error::OutOfOrder { last: last.t, got: t });
            }
        }
        if ctx.pool_index >= self.index.len() {
            return Err(Error::Ingestion(format!("context pool index {} outside the neighbor index", ctx.pool_index)));
        }
        let stored = Stored { t, site: ctx.pool_index as u32, y };
        self.running[arm][ctx.pool_index].add(y);
        self.log.push((arm, stored));
        if self.log.len() % self.config.cadence == 0 {
            self.current = Arc::new(NuisanceSnapshot {
                time: t + 1,
                arms: self.arms,
                config: self.config,
                index: Arc::clone(&self.index),
                agg: self.running.clone(),
                table: OnceLock::new(),
            });
            self.rebuilds += 1;
            return Ok(true);
        }
        Ok(false)
    }

    /// Frozen view of every observation with index `< t`.
    pub fn snapshot(&self, t: usize) -> NuisanceSnapshot {
        let mut agg = vec![vec![SiteAgg::default(); self.index.len()]; self.arms];
        for (arm, s) in self.log.iter().take_while(|(_, s)| s.t < t) {
            agg[*arm][s.site as usize].add(s.y);
        }
        NuisanceSnapshot {
            time: t,
            arms: self.arms,
            config: self.config,
            index: Arc::clone(&self.index),
            agg,
            table: OnceLock::new(),
        }
    }
}

//! Monte Carlo coverage experiments.
//!
//! An [`Experiment`] is prepared once from an [`ExperimentConfig`]; each
//! replication then simulates its own trajectories from seeded streams and
//! runs every configured method on them. Results are aggregated into a
//! [`CoverageTable`] and written as CSV.

mod config;
mod report;
mod simulate;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use nalgebra::DVector;
use rayon::prelude::*;

pub use config::{
    load_config, parse_config, AutoKeyword, Binarize, EvalPolicySpec, ExperimentConfig, ModelSpec, NuisanceSpec,
    PoolSpec, ScenarioSpec, DEFAULT_CHECKPOINTS,
};
pub use report::{
    mc_se, read_replications, read_results, write_replications, write_results, CoverageRow, CoverageTable, PlotRow,
    ReplicationRow, WidthRow, COVERAGE_HEADER, PLOTDATA_HEADER, REPLICATIONS_HEADER, WIDTHS_HEADER,
};
pub use simulate::{external_contexts, simulate, stream_rng, Stream, Trajectory, World};

use crate::error::{Error, Result};
use crate::inference::{
    contrast_interval, region_contains, run_pipeline, CheckpointResult, MethodKind, PipelineInput, VariancePool,
};
use crate::mestim::{projection_oracle, Theta, WorkingModel};
use crate::nuisance::NeighborIndex;
use crate::policies::ActionDistribution;

/// A configuration with its shared inputs resolved.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub world: World,
    pub wm: WorkingModel,
    pub pi_e: ActionDistribution,
    /// Target parameter: the projection of the true outcome model.
    pub theta_star: Theta,
}

impl Experiment {
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let pool = config.build_pool()?;
        let mut scenario = config.base_scenario()?;
        let pi_e = config.eval_policy(scenario.arms)?;
        scenario.binarize_threshold = match config.scenario.binarize {
            None => None,
            Some(Binarize::Threshold(t)) => Some(t),
            Some(Binarize::Keyword(AutoKeyword::Auto)) => Some(scenario.population_mean(&pool, pi_e.probs())?),
        };
        let wm = config.working_model(scenario.arms, pool.dim())?;
        let theta_star = projection_oracle(&wm, &scenario, &pool, &pi_e)?;
        let index = Arc::new(NeighborIndex::from_pool(&pool)?);
        let world = World {
            nuisance: config.nuisance_config(scenario.binarize_threshold.is_some()),
            policy: config.deployed_policy(),
            scenario,
            pool: Arc::new(pool),
            index,
        };
        Ok(Self { config, world, wm, pi_e, theta_star })
    }

    pub fn policy_name(&self) -> &'static str {
        self.config.policy.name()
    }

    /// Runs every method on replication `rep`. Failures become flagged rows.
    pub fn run_replication(&self, rep: usize) -> Result<Vec<ReplicationRow>> {
        let cfg = &self.config;
        let horizon = *cfg.checkpoints.last().unwrap_or(&cfg.horizon);
        let (seed, r) = (cfg.seed, rep as u64);
        let needs = |m: MethodKind| cfg.methods.contains(&m);
        let main = if cfg.methods.iter().any(|m| *m != MethodKind::MaipwmSplitting) {
            Some(simulate(&self.world, seed, r, horizon, None)?)
        } else {
            None
        };
        let split = if needs(MethodKind::MaipwmSplitting) {
            Some(simulate(&self.world, seed, r, horizon, Some(cfg.split_ratio))?)
        } else {
            None
        };
        let external = if needs(MethodKind::MaipwmExternal) {
            let n = (cfg.external_ratio * horizon as f64).ceil() as usize;
            external_contexts(&self.world.pool, seed, r, n)
        } else {
            Vec::new()
        };

        let mut rows = Vec::new();
        for &method in &cfg.methods {
            let traj = match method {
                MethodKind::MaipwmSplitting => split.as_ref(),
                _ => main.as_ref(),
            }
            .ok_or(Error::EmptyHistory)?;
            let pool = match method {
                MethodKind::MaipwmExternal => VariancePool::External { contexts: &external, ratio: cfg.external_ratio },
                MethodKind::MaipwmReuse => VariancePool::Reuse,
                MethodKind::MaipwmSplitting => VariancePool::Split { contexts: &traj.held_out },
                MethodKind::MaipwmNaive | MethodKind::Ipw => VariancePool::None,
            };
            let input = PipelineInput::new(&self.wm, &self.pi_e, &traj.history, &traj.blocks, cfg.alpha);
            let results = run_pipeline(method, &input, pool, &cfg.checkpoints);
            for (&checkpoint, res) in cfg.checkpoints.iter().zip(results) {
                rows.push(self.row(rep, method, checkpoint, res));
            }
        }
        Ok(rows)
    }

    fn row(&self, rep: usize, method: MethodKind, checkpoint: usize, res: Result<CheckpointResult>) -> ReplicationRow {
        let failed = |error: String, n_obs: usize| ReplicationRow {
            rep,
            method,
            checkpoint,
            covered: false,
            statistic: f64::NAN,
            flagged: true,
            error: Some(error),
            contrast_covered: Vec::new(),
            widths: Vec::new(),
            theta_hat: Vec::new(),
            n_obs,
        };
        let r = match res {
            Ok(r) => r,
            Err(e) => return failed(e.to_string(), 0),
        };
        let eval = || -> Result<ReplicationRow> {
            let statistic = r.region.statistic(&self.theta_star)?;
            let covered = region_contains(&r.region, &self.theta_star)?;
            let d = self.theta_star.len();
            let mut contrast_covered = Vec::with_capacity(d);
            let mut widths = Vec::with_capacity(d);
            if !r.region.singular {
                for j in 0..d {
                    let eta = DVector::from_fn(d, |i, _| if i == j { 1.0 } else { 0.0 });
                    let (lo, hi) = contrast_interval(&r.region, &eta)?;
                    contrast_covered.push(lo <= self.theta_star[j] && self.theta_star[j] <= hi);
                    widths.push(hi - lo);
                }
            }
            Ok(ReplicationRow {
                rep,
                method,
                checkpoint,
                covered,
                statistic,
                flagged: r.region.singular,
                error: r.region.singular.then(|| "singular region".to_string()),
                contrast_covered,
                widths,
                theta_hat: r.theta_hat.iter().copied().collect(),
                n_obs: r.n_obs,
            })
        };
        eval().unwrap_or_else(|e| failed(e.to_string(), r.n_obs))
    }

    /// Runs all replications on a pool of `config.workers` threads. Rows are
    /// in replication order whatever the thread count.
    pub fn run(&self) -> Result<Vec<ReplicationRow>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let per_rep: Vec<Result<Vec<ReplicationRow>>> =
            pool.install(|| (0..self.config.reps).into_par_iter().map(|rep| self.run_replication(rep)).collect());
        let mut rows = Vec::new();
        for r in per_rep {
            rows.extend(r?);
        }
        Ok(rows)
    }

    pub fn aggregate(&self, rows: &[ReplicationRow]) -> CoverageTable {
        CoverageTable::aggregate(rows, self.policy_name(), &self.config.scenario_label(), self.config.alpha)
    }
}

/// Runs a configuration and writes `coverage.csv`, `widths.csv`,
/// `plotdata.csv` and `replications.csv` into `out`.
pub fn run_experiment(config: ExperimentConfig, out: &Path) -> Result<CoverageTable> {
    let exp = Experiment::prepare(config)?;
    info!(
        "{} reps of {} under {} on {} worker(s)",
        exp.config.reps,
        exp.config.scenario_label(),
        exp.policy_name(),
        exp.config.workers
    );
    let rows = exp.run()?;
    let table = exp.aggregate(&rows);
    write_results(&table, out)?;
    write_replications(&rows, &out.join("replications.csv"))?;
    Ok(table)
}

/// Re-aggregates a `replications.csv` written by [`run_experiment`].
pub fn aggregate_from_replications(path: &Path, policy: &str, scenario: &str, alpha: f64) -> Result<CoverageTable> {
    let rows = read_replications(path)?;
    Ok(CoverageTable::aggregate(&rows, policy, scenario, alpha))
}

/// One named self-check outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Small end-to-end checks: determinism across worker counts, CSV round
/// trips and sane coverage on a short uniform run.
pub fn selfcheck(scratch: &Path) -> Result<Vec<CheckOutcome>> {
    let text = r#"
horizon = 400
reps = 8
checkpoints = [200, 400]
methods = ["maipwm_external", "maipwm_reuse", "ipw"]
scenario = { preset = 1, arms = 3 }
policy = { kind = "uniform" }
pool = { source = "synthetic", size = 100, dim = 2 }
"#;
    let mut cfg = parse_config(text)?;
    let mut out = Vec::new();

    cfg.workers = 1;
    let a = Experiment::prepare(cfg.clone())?.run()?;
    cfg.workers = 3;
    let b = Experiment::prepare(cfg.clone())?.run()?;
    let same = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| format!("{x:?}") == format!("{y:?}"));
    out.push(CheckOutcome { name: "deterministic across workers", passed: same, detail: format!("{} rows", a.len()) });

    let dir: PathBuf = scratch.join("selfcheck");
    let table = run_experiment(cfg.clone(), &dir)?;
    let back = read_results(&dir)?;
    out.push(CheckOutcome {
        name: "csv round trip",
        passed: back.coverage == table.coverage && back.widths == table.widths,
        detail: dir.display().to_string(),
    });

    let flagged: usize = table.coverage.iter().map(|r| r.flagged).sum();
    out.push(CheckOutcome { name: "no flagged fits", passed: flagged == 0, detail: format!("{flagged} flagged") });

    let min = table.coverage.iter().map(|r| r.coverage).fold(1.0_f64, f64::min);
    out.push(CheckOutcome {
        name: "coverage plausible",
        passed: min >= 0.25,
        detail: format!("minimum coverage {min:.3} at nominal {:.2}", 1.0 - cfg.alpha),
    });
    Ok(out)
}

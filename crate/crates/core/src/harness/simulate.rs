//! Seeded trajectory simulation.
//!
//! Each replication owns one ChaCha generator per named stream, keyed by the
//! base seed and replication index, with the stream name selecting the ChaCha
//! stream. Every round draws one context index, one standard normal outcome
//! noise, one split coin and one action uniform whether or not they are used,
//! so the environment is identical across methods and splitting modes.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::env::{Context, FeaturePool, Scenario, SplitFlag};
use crate::error::Result;
use crate::inference::Block;
use crate::mestim::Observation;
use crate::nuisance::{MomentModel, NeighborIndex, NuisanceConfig, NuisanceState};
use crate::policies::{CommonDraws, FrozenPolicy, Policy};

/// Independent random streams of one replication.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Context,
    Action,
    Outcome,
    Split,
    Thompson,
    External,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Self::Context => 1,
            Self::Action => 2,
            Self::Outcome => 3,
            Self::Split => 4,
            Self::Thompson => 5,
            Self::External => 6,
        }
    }
}

/// Generator for `stream` of replication `rep`.
pub fn stream_rng(base_seed: u64, rep: u64, stream: Stream) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&base_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&rep.to_le_bytes());
    seed[16..24].copy_from_slice(b"maipwm\0\0");
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream.id());
    rng
}

/// Shared, read-only inputs to every replication.
#[derive(Debug, Clone)]
pub struct World {
    pub scenario: Scenario,
    pub pool: Arc<FeaturePool>,
    pub index: Arc<NeighborIndex>,
    pub policy: Policy,
    pub nuisance: NuisanceConfig,
}

/// One simulated history and the policies that generated it.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub history: Vec<Observation>,
    pub blocks: Vec<Block>,
    /// Rounds routed to the held-out history (splitting only).
    pub held_out: Vec<(usize, Context)>,
}

impl Trajectory {
    pub fn actions(&self) -> Vec<usize> {
        self.history.iter().map(|o| o.arm).collect()
    }
}

/// Simulates `horizon` rounds. With `split_ratio` set, rounds whose coin
/// comes up 1 are only recorded as held-out contexts and never treated.
pub fn simulate(world: &World, base_seed: u64, rep: u64, horizon: usize, split_ratio: Option<f64>) -> Result<Trajectory> {
    let mut ctx_rng = stream_rng(base_seed, rep, Stream::Context);
    let mut action_rng = stream_rng(base_seed, rep, Stream::Action);
    let mut outcome_rng = stream_rng(base_seed, rep, Stream::Outcome);
    let mut split_rng = stream_rng(base_seed, rep, Stream::Split);
    let mut thompson_rng = stream_rng(base_seed, rep, Stream::Thompson);

    let pool = &world.pool;
    let k = world.scenario.arms;
    let draws = world.policy.kind.draws();
    let mut nuisance = NuisanceState::new(k, Arc::clone(&world.index), world.nuisance)?;
    let freeze = |nuisance: &NuisanceState, rng: &mut ChaCha8Rng| {
        let model: Arc<dyn MomentModel + Send> = Arc::clone(nuisance.current()) as Arc<dyn MomentModel + Send>;
        let cd = if draws > 0 { CommonDraws::generate(rng, draws, k) } else { CommonDraws::empty() };
        FrozenPolicy::new(world.policy, model, Arc::new(cd)).with_pool(pool)
    };

    let mut traj = Trajectory::default();
    traj.blocks.push(Block { start: 1, policy: freeze(&nuisance, &mut thompson_rng) });
    for t in 1..=horizon {
        let ctx = pool.context(ctx_rng.random_range(0..pool.len()));
        let noise: f64 = StandardNormal.sample(&mut outcome_rng);
        let coin: f64 = split_rng.random();
        let u: f64 = action_rng.random();
        let split = SplitFlag(split_ratio.is_some_and(|r| coin < r));
        if split.0 {
            traj.held_out.push((t, ctx));
            continue;
        }
        let block_id = traj.blocks.len() - 1;
        let dist = traj.blocks[block_id].policy.probs(&ctx)?;
        let arm = dist.arm_for_uniform(u);
        let y = world.scenario.observed_outcome(&ctx, arm, pool, noise)?;
        let retrained = nuisance.update(t, &ctx, arm, y)?;
        traj.history.push(Observation { t, ctx, arm, y, logged_dist: dist, split, snapshot_id: block_id });
        if retrained {
            traj.blocks.push(Block { start: t + 1, policy: freeze(&nuisance, &mut thompson_rng) });
        }
    }
    // A retrain on the final round leaves an unused block.
    if traj.blocks.len() > 1 && traj.history.last().is_some_and(|o| o.snapshot_id + 1 < traj.blocks.len()) {
        traj.blocks.pop();
    }
    Ok(traj)
}

/// `n` contexts from the external stream.
pub fn external_contexts(pool: &FeaturePool, base_seed: u64, rep: u64, n: usize) -> Vec<Context> {
    let mut rng = stream_rng(base_seed, rep, Stream::External);
    (0..n).map(|_| pool.context(rng.random_range(0..pool.len()))).collect()
}

//! Variance-stabilized estimation and ellipsoidal confidence regions.
//!
//! Given per-block variance estimates `V̂_b`, the stabilized estimator `θ̂`
//! solves `Σ_t V̂_t^{-1/2} s_t(θ) = 0` starting from `θ̃`. With
//! `B = T^{-1/2} Σ_t V̂_t^{-1/2} ṡ_t(θ̂)` the region
//!
//! ```text
//! { θ : ‖B (θ̂ − θ)‖² ≤ χ²_{d, 1−α} }
//! ```
//!
//! has asymptotic coverage `1 − α` even when the logging policy keeps
//! changing.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::env::Context;
use crate::error::{Error, Result};
use crate::mathkit::{chi2_quantile, normal_quantile, sym_inv_sqrt, SymMatrix, DEFAULT_EIGEN_FLOOR};
use crate::mestim::{newton_solve, Observation, ScoreData, Theta, WorkingModel, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::nuisance::MomentModel;
use crate::policies::{ActionDistribution, FrozenPolicy};
use crate::varest::{vhat_naive, vhat_pool_weighted, GHPredictors, VHatSequence};

/// An ellipsoid `{θ : ‖B(center − θ)‖² ≤ radius}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceRegion {
    pub center: Theta,
    pub shape: DMatrix<f64>,
    pub radius: f64,
    pub alpha: f64,
    /// `B` is numerically rank deficient: the region is unbounded along its
    /// null directions.
    pub singular: bool,
}

const SINGULAR_RTOL: f64 = 1e-10;

impl ConfidenceRegion {
    pub fn new(center: Theta, shape: DMatrix<f64>, alpha: f64) -> Result<Self> {
        let d = center.len();
        if shape.nrows() != d || shape.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: shape.nrows() });
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Domain(format!("alpha must lie in (0,1), got {alpha}")));
        }
        let radius = chi2_quantile(d, 1.0 - alpha)?;
        let sv = shape.clone().singular_values();
        let max = sv.iter().fold(0.0_f64, |a, v| a.max(*v));
        let min = sv.iter().fold(f64::INFINITY, |a, v| a.min(*v));
        let singular = !(max > 0.0) || min <= SINGULAR_RTOL * max;
        Ok(Self { center, shape, radius, alpha, singular })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// `‖B(center − θ)‖²`
    pub fn statistic(&self, theta: &Theta) -> Result<f64> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: theta.len() });
        }
        Ok((&self.shape * (&self.center - theta)).norm_squared())
    }

    /// `ηᵀ (BᵀB)⁻¹ η`: the squared standard error of `ηᵀθ̂`.
    pub fn contrast_variance(&self, eta: &DVector<f64>) -> Result<f64> {
        if eta.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: eta.len() });
        }
        if eta.iter().all(|v| *v == 0.0) {
            return Ok(0.0);
        }
        if self.singular {
            return Err(Error::Singular("region shape"));
        }
        let gram = self.shape.transpose() * &self.shape;
        let x = gram.lu().solve(eta).ok_or(Error::Singular("region shape"))?;
        Ok(eta.dot(&x).max(0.0))
    }
}

/// Membership test; the boundary belongs to the region.
pub fn region_contains(r: &ConfidenceRegion, theta: &Theta) -> Result<bool> {
    Ok(r.statistic(theta)? <= r.radius)
}

/// Projection of the region onto `ηᵀθ`.
pub fn marginal_interval(r: &ConfidenceRegion, eta: &DVector<f64>) -> Result<(f64, f64)> {
    let mid = eta.dot(&r.center);
    let half = (r.radius * r.contrast_variance(eta)?).sqrt();
    Ok((mid - half, mid + half))
}

/// Pointwise `1 − α` interval for `ηᵀθ` from the same normal approximation.
pub fn contrast_interval(r: &ConfidenceRegion, eta: &DVector<f64>) -> Result<(f64, f64)> {
    let mid = eta.dot(&r.center);
    let z = normal_quantile(1.0 - r.alpha / 2.0)?;
    let half = z * r.contrast_variance(eta)?.sqrt();
    Ok((mid - half, mid + half))
}

/// Rounds that fall in blocks with nonzero weight.
fn weighted_rounds(data: &ScoreData, vhats: &VHatSequence) -> Result<usize> {
    let mut n = 0;
    for i in 0..data.len() {
        n += usize::from(!vhats.is_excluded(vhats.block_of(data.time(i))?));
    }
    Ok(n)
}

/// `(Σ_t W_t s_t, Σ_t W_t ṡ_t)` with `W_t` the block's `V̂^{-1/2}`.
fn weighted_sums(data: &ScoreData, vhats: &VHatSequence, theta: &Theta) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = data.model().dim();
    let nb = vhats.len();
    let mut s_blocks = vec![DVector::zeros(d); nb];
    let mut h_blocks = vec![DMatrix::zeros(d, d); nb];
    for i in 0..data.len() {
        let b = vhats.block_of(data.time(i))?;
        s_blocks[b] += data.score_term(i, theta)?;
        h_blocks[b] += data.score_grad_term(i, theta)?;
    }
    let mut s = DVector::zeros(d);
    let mut h = DMatrix::zeros(d, d);
    for b in 0..nb {
        let w = vhats.inv_sqrt(b).as_matrix();
        s += w * &s_blocks[b];
        h += w * &h_blocks[b];
    }
    Ok((s, h))
}

/// `θ̂` from precomputed score data, by damped Newton from `init`.
pub fn solve_hat_theta_data(
    data: &ScoreData,
    vhats: &VHatSequence,
    init: Theta,
    tol: f64,
    max_iter: usize,
) -> Result<Theta> {
    if data.is_empty() {
        return Err(Error::EmptyHistory);
    }
    newton_solve(|th| weighted_sums(data, vhats, th), init, data.len() as f64, tol, max_iter)
}

/// The variance-stabilized estimator `θ̂`, initialized at `θ̃`.
pub fn solve_hat_theta(
    wm: &WorkingModel,
    history: &[Observation],
    snapshots: &[&dyn MomentModel],
    pi_e: &ActionDistribution,
    vhats: &VHatSequence,
    tol: f64,
    max_iter: usize,
) -> Result<Theta> {
    let data = ScoreData::new(wm, history, snapshots, pi_e)?;
    let tilde = data.solve(tol, max_iter)?;
    solve_hat_theta_data(&data, vhats, tilde, tol, max_iter)
}

/// Region around `θ̂` from precomputed score data.
pub fn build_region_data(data: &ScoreData, vhats: &VHatSequence, hat: &Theta, alpha: f64) -> Result<ConfidenceRegion> {
    let (_, h) = weighted_sums(data, vhats, hat)?;
    let b = h / (weighted_rounds(data, vhats)? as f64).sqrt();
    ConfidenceRegion::new(hat.clone(), b, alpha)
}

pub fn build_region(
    wm: &WorkingModel,
    history: &[Observation],
    snapshots: &[&dyn MomentModel],
    pi_e: &ActionDistribution,
    vhats: &VHatSequence,
    hat: &Theta,
    alpha: f64,
) -> Result<ConfidenceRegion> {
    let data = ScoreData::new(wm, history, snapshots, pi_e)?;
    build_region_data(&data, vhats, hat, alpha)
}

/// How `V̂_t` is estimated, or the IPW baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    MaipwmExternal,
    MaipwmSplitting,
    MaipwmReuse,
    MaipwmNaive,
    Ipw,
}

impl MethodKind {
    pub const ALL: [MethodKind; 5] =
        [Self::MaipwmExternal, Self::MaipwmSplitting, Self::MaipwmReuse, Self::MaipwmNaive, Self::Ipw];

    pub fn name(self) -> &'static str {
        match self {
            Self::MaipwmExternal => "maipwm_external",
            Self::MaipwmSplitting => "maipwm_splitting",
            Self::MaipwmReuse => "maipwm_reuse",
            Self::MaipwmNaive => "maipwm_naive",
            Self::Ipw => "ipw",
        }
    }
}

impl std::fmt::Display for MethodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// The logging policy in force from round `start` until the next block.
#[derive(Debug, Clone)]
pub struct Block {
    pub start: usize,
    pub policy: FrozenPolicy,
}

/// Contexts available for estimating the score variance.
#[derive(Debug, Clone, Copy)]
pub enum VariancePool<'a> {
    /// An independent draw of contexts; the first `⌈ratio · T⌉` are used at
    /// checkpoint `T`.
    External { contexts: &'a [Context], ratio: f64 },
    /// Contexts of the estimation history that precede each block.
    Reuse,
    /// `(t, context)` pairs routed to the held-out history; those with
    /// `t` before each block are used.
    Split { contexts: &'a [(usize, Context)] },
    /// No pool: the naive and IPW methods.
    None,
}

/// Everything one pipeline run needs.
#[derive(Debug, Clone, Copy)]
pub struct PipelineInput<'a> {
    pub wm: &'a WorkingModel,
    pub pi_e: &'a ActionDistribution,
    /// Estimation history, in increasing `t`; `snapshot_id` indexes `blocks`.
    pub history: &'a [Observation],
    pub blocks: &'a [Block],
    pub alpha: f64,
    pub eigen_floor: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl<'a> PipelineInput<'a> {
    pub fn new(
        wm: &'a WorkingModel,
        pi_e: &'a ActionDistribution,
        history: &'a [Observation],
        blocks: &'a [Block],
        alpha: f64,
    ) -> Self {
        Self {
            wm,
            pi_e,
            history,
            blocks,
            alpha,
            eigen_floor: DEFAULT_EIGEN_FLOOR,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

/// Estimate and region at one checkpoint.
#[derive(Debug, Clone)]
pub struct CheckpointResult {
    pub checkpoint: usize,
    pub theta_tilde: Theta,
    pub theta_hat: Theta,
    pub region: ConfidenceRegion,
    /// `‖(1/T) Σ V̂^{-1/2} s(θ̂)‖∞`
    pub residual: f64,
    /// Rounds in the estimation history up to the checkpoint.
    pub n_obs: usize,
    /// Burn-in blocks given zero weight: those logged under an untrained
    /// nuisance snapshot or without pool contexts.
    pub excluded_blocks: usize,
    /// Rounds with nonzero weight; `B` is normalized by its square root.
    pub weighted_rounds: usize,
}

/// Runs estimation and region construction at each checkpoint, using the
/// history prefix with `t <= checkpoint`.
pub fn run_pipeline(
    method: MethodKind,
    input: &PipelineInput<'_>,
    pool: VariancePool<'_>,
    checkpoints: &[usize],
) -> Vec<Result<CheckpointResult>> {
    let snapshots: Vec<&dyn MomentModel> = input.blocks.iter().map(|b| &*b.policy.model as &dyn MomentModel).collect();
    checkpoints
        .iter()
        .map(|&c| {
            run_checkpoint(method, input, pool, &snapshots, c)
                .map_err(|e| Error::Checkpoint { checkpoint: c, source: Box::new(e) })
        })
        .collect()
}

fn run_checkpoint(
    method: MethodKind,
    input: &PipelineInput<'_>,
    pool: VariancePool<'_>,
    snapshots: &[&dyn MomentModel],
    checkpoint: usize,
) -> Result<CheckpointResult> {
    let n = input.history.partition_point(|o| o.t <= checkpoint);
    let prefix = &input.history[..n];
    if prefix.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let data = ScoreData::new(input.wm, prefix, snapshots, input.pi_e)?;
    let d = input.wm.dim();

    if method == MethodKind::Ipw {
        let (theta, cov) = data.ipw_fit(input.tol, input.max_iter)?;
        let shape = sym_inv_sqrt(&cov, floor_for(&cov, input.eigen_floor))?.into_matrix();
        let region = ConfidenceRegion::new(theta.clone(), shape, input.alpha)?;
        return Ok(CheckpointResult {
            checkpoint,
            theta_tilde: theta.clone(),
            theta_hat: theta,
            region,
            residual: 0.0,
            n_obs: n,
            excluded_blocks: 0,
            weighted_rounds: n,
        });
    }

    let tilde = data.solve(input.tol, input.max_iter)?;
    let mut excluded_blocks = 0;
    let vhats = if method == MethodKind::MaipwmNaive {
        let scores = (0..n).map(|i| data.score_term(i, &tilde)).collect::<Result<Vec<_>>>()?;
        let v = vhat_naive(&scores)?;
        VHatSequence::new(vec![prefix[0].t], vec![v], input.eigen_floor)?
    } else {
        let mut used: Vec<usize> = prefix.iter().map(|o| o.snapshot_id).collect();
        used.dedup();
        let mut starts = Vec::with_capacity(used.len());
        let mut mats = Vec::with_capacity(used.len());
        let mut excluded = Vec::with_capacity(used.len());
        let mut reuse_cursor = 0;
        let mut split_cursor = 0;
        let mut counts: BTreeMap<usize, (Context, f64)> = BTreeMap::new();
        if let VariancePool::External { contexts, ratio } = pool {
            {
                let want = (ratio * checkpoint as f64).ceil() as usize;
                if want > contexts.len() {
                    return Err(Error::Config(format!(
                        "external pool has {} contexts, checkpoint {checkpoint} needs {want}",
                        contexts.len()
                    )));
                }
                for ctx in &contexts[..want] {
                    tally(&mut counts, ctx);
                }
            }
        }
        for &id in &used {
            let block = input.blocks.get(id).ok_or(Error::DimensionMismatch { expected: input.blocks.len(), got: id })?;
            // The first round that used this block's policy.
            let start = prefix.iter().find(|o| o.snapshot_id == id).map(|o| o.t).unwrap_or(block.start);
            match pool {
                VariancePool::Reuse => {
                    while reuse_cursor < n && prefix[reuse_cursor].t < start {
                        tally(&mut counts, &prefix[reuse_cursor].ctx);
                        reuse_cursor += 1;
                    }
                }
                VariancePool::Split { contexts } => {
                    while split_cursor < contexts.len() && contexts[split_cursor].0 < start {
                        tally(&mut counts, &contexts[split_cursor].1);
                        split_cursor += 1;
                    }
                }
                VariancePool::External { .. } => {}
                VariancePool::None => {
                    return Err(Error::Config(format!("{method} needs a variance pool")));
                }
            }
            let untrained = block.policy.model.is_untrained();
            if counts.is_empty() && !untrained {
                warn!("{method} at T={checkpoint}: block starting at t={start} has no pool contexts");
            }
            let v = if counts.is_empty() || untrained {
                excluded.push(true);
                SymMatrix::identity(d)
            } else {
                excluded.push(false);
                let gh = GHPredictors::new(input.wm, &tilde, &*block.policy.model)?;
                let points: Vec<(&Context, f64)> = counts.values().map(|(c, w)| (c, *w)).collect();
                vhat_pool_weighted(&gh, input.pi_e, &points, &|ctx| block.policy.probs(ctx))?
            };
            starts.push(start);
            mats.push(v);
        }
        let seq = VHatSequence::new(starts, mats, input.eigen_floor)?;
        if excluded.iter().all(|e| *e) {
            // Nothing to stabilize with: identity weights throughout.
            seq
        } else {
            excluded_blocks = excluded.iter().filter(|e| **e).count();
            seq.with_excluded(&excluded)?
        }
    };

    let hat = solve_hat_theta_data(&data, &vhats, tilde.clone(), input.tol, input.max_iter)?;
    let (s, h) = weighted_sums(&data, &vhats, &hat)?;
    let weighted = weighted_rounds(&data, &vhats)?;
    let residual = s.amax() / n as f64;
    let region = ConfidenceRegion::new(hat.clone(), h / (weighted as f64).sqrt(), input.alpha)?;
    Ok(CheckpointResult {
        checkpoint,
        theta_tilde: tilde,
        theta_hat: hat,
        region,
        residual,
        n_obs: n,
        excluded_blocks,
        weighted_rounds: weighted,
    })

}

fn tally(counts: &mut BTreeMap<usize, (Context, f64)>, ctx: &Context) {
    counts.entry(ctx.pool_index).or_insert_with(|| (ctx.clone(), 0.0)).1 += 1.0;
}

/// Eigenvalue floor for inverting a sandwich covariance, relative to its
/// scale.
fn floor_for(cov: &SymMatrix, floor: f64) -> f64 {
    let scale = cov.op_norm();
    if scale > 0.0 {
        (floor * scale).max(f64::MIN_POSITIVE)
    } else {
        floor
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn region_1d(b: f64, alpha: f64) -> ConfidenceRegion {
        ConfidenceRegion::new(DVector::from_vec(vec![0.0]), DMatrix::from_element(1, 1, b), alpha).unwrap()
    }

    #[test]
    fn membership_conventions() {
        let r = region_1d(2.0, 0.2);
        assert!(region_contains(&r, &r.center).unwrap());
        // ‖B x‖² = radius exactly on the boundary.
        let edge = DVector::from_vec(vec![r.radius.sqrt() / 2.0]);
        assert!((r.statistic(&edge).unwrap() - r.radius).abs() < 1e-12);
        let far = DVector::from_vec(vec![(2.0 * r.radius).sqrt() / 2.0]);
        assert!(!region_contains(&r, &far).unwrap());
        assert!(region_contains(&r, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn marginal_examples() {
        let mut r = region_1d(2.0, 0.2);
        r.radius = 1.642;
        let (lo, hi) = marginal_interval(&r, &DVector::from_vec(vec![1.0])).unwrap();
        assert_abs_diff_eq!(hi, 0.6407, epsilon = 1e-4);
        assert_abs_diff_eq!(lo, -0.6407, epsilon = 1e-4);
        let (lo, hi) = marginal_interval(&r, &DVector::zeros(1)).unwrap();
        assert_eq!((lo, hi), (0.0, 0.0));
        let r3 = region_1d(6.0, 0.2);
        let w2 = marginal_interval(&region_1d(2.0, 0.2), &DVector::from_vec(vec![1.0])).unwrap();
        let w6 = marginal_interval(&r3, &DVector::from_vec(vec![1.0])).unwrap();
        assert_abs_diff_eq!((w2.1 - w2.0) / 3.0, w6.1 - w6.0, epsilon = 1e-12);
    }

    #[test]
    fn nesting_by_alpha() {
        let wide = region_1d(1.0, 0.05);
        let narrow = region_1d(1.0, 0.2);
        assert!(narrow.radius < wide.radius);
    }

    #[test]
    fn singular_shape_is_flagged() {
        let r = ConfidenceRegion::new(DVector::zeros(2), DMatrix::from_diagonal_element(2, 2, 0.0), 0.2).unwrap();
        assert!(r.singular);
        assert!(marginal_interval(&r, &DVector::from_vec(vec![1.0, 0.0])).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in MethodKind::ALL {
            assert_eq!(m.name().parse::<MethodKind>().unwrap(), m);
        }
        assert!("bogus".parse::<MethodKind>().is_err());
    }
}

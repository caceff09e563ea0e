//! Conditional score-variance estimators.
//!
//! For a round with context `x`, logged policy `P(·|x)` and nuisance means
//! `f(x, ·)`, the augmented score splits into a context part and an outcome
//! part,
//!
//! ```text
//! s = ν(x) + (πe(A)/P(A|x)) · c (Y − f(x, A)) z(x, A),   ν(x) = Σ_a πe(a) g(x, a)
//! ```
//!
//! so by the law of total variance
//!
//! ```text
//! Var(s | H) = Var_x(ν) + E_x Σ_a (πe(a)² / P(a|x)) · (h(x, a) − g gᵀ)
//! ```
//!
//! where `g` and `h` are the conditional first and second moments of
//! `ṁ(a, x, Y)`. The plug-in versions replace the true moments with the
//! nuisance predictions and the expectation over `x` with an average over a
//! pool of contexts.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::env::{Context, FeaturePool, Scenario, SplitFlag};
use crate::error::{Error, Result};
use crate::mathkit::{sym_inv_sqrt, SymMatrix};
use crate::mestim::{Observation, ScoreData, Theta, WorkingModel};
use crate::nuisance::MomentModel;
use crate::policies::ActionDistribution;

/// Plug-in moments of `ṁ` at a preliminary estimate `θ̄`.
#[derive(Clone, Copy)]
pub struct GHPredictors<'a> {
    pub theta_bar: &'a Theta,
    pub model: &'a dyn MomentModel,
    pub wm: &'a WorkingModel,
}

impl<'a> GHPredictors<'a> {
    pub fn new(wm: &'a WorkingModel, theta_bar: &'a Theta, model: &'a dyn MomentModel) -> Result<Self> {
        if theta_bar.len() != wm.dim() {
            return Err(Error::DimensionMismatch { expected: wm.dim(), got: theta_bar.len() });
        }
        if theta_bar.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite preliminary estimate".into()));
        }
        if model.arms() != wm.arms() {
            return Err(Error::DimensionMismatch { expected: wm.arms(), got: model.arms() });
        }
        Ok(Self { theta_bar, model, wm })
    }

    /// `(z, ψ(θ̄ᵀz))` for one arm.
    fn link(&self, ctx: &Context, arm: usize) -> Result<(DVector<f64>, f64)> {
        let z = self.wm.z(ctx, arm)?;
        let eta = self.theta_bar.dot(&z);
        Ok((z, self.wm.family.psi(eta)))
    }
}

/// `g(x, a) = c (f − ψ(θ̄ᵀz)) z`: the predicted conditional mean of `ṁ`.
pub fn glm_g(gh: &GHPredictors<'_>, ctx: &Context, arm: usize) -> Result<DVector<f64>> {
    let (z, psi) = gh.link(ctx, arm)?;
    let f = gh.model.mean(ctx, arm);
    Ok(z * (gh.wm.family.scale() * (f - psi)))
}

/// `h(x, a) = c² (e − 2fψ + ψ²) z zᵀ`: the predicted conditional second
/// moment of `ṁ`.
pub fn glm_h(gh: &GHPredictors<'_>, ctx: &Context, arm: usize) -> Result<SymMatrix> {
    let (z, psi) = gh.link(ctx, arm)?;
    let f = gh.model.mean(ctx, arm);
    let e = gh.model.second_moment(ctx, arm);
    let c = gh.wm.family.scale();
    SymMatrix::new(&z * z.transpose() * (c * c * (e - 2.0 * f * psi + psi * psi)))
}

/// `ν(x) = Σ_a πe(a) g(x, a)`.
pub fn nu_hat(gh: &GHPredictors<'_>, pi_e: &ActionDistribution, ctx: &Context) -> Result<DVector<f64>> {
    let mut nu = DVector::zeros(gh.wm.dim());
    for a in 0..gh.wm.arms() {
        let p = pi_e.prob(a);
        if p != 0.0 {
            nu += glm_g(gh, ctx, a)? * p;
        }
    }
    Ok(nu)
}

/// Plug-in `Var(s | H)` averaged over `pool_points`, each point weighing
/// equally. `propensity_fn` must be the logged policy in force for the block.
pub fn vhat_pool(
    gh: &GHPredictors<'_>,
    pi_e: &ActionDistribution,
    pool_points: &[Context],
    propensity_fn: &dyn Fn(&Context) -> Result<ActionDistribution>,
) -> Result<SymMatrix> {
    let weighted: Vec<(&Context, f64)> = pool_points.iter().map(|c| (c, 1.0)).collect();
    vhat_pool_weighted(gh, pi_e, &weighted, propensity_fn)
}

/// [`vhat_pool`] with a multiplicity per point, e.g. from grouping repeated
/// pool rows.
pub fn vhat_pool_weighted(
    gh: &GHPredictors<'_>,
    pi_e: &ActionDistribution,
    points: &[(&Context, f64)],
    propensity_fn: &dyn Fn(&Context) -> Result<ActionDistribution>,
) -> Result<SymMatrix> {
    let total: f64 = points.iter().map(|(_, w)| w).sum();
    if points.is_empty() || !(total > 0.0) {
        return Err(Error::EmptyPool);
    }
    let (k, d) = (gh.wm.arms(), gh.wm.dim());
    let c = gh.wm.family.scale();
    let mut second = DMatrix::zeros(d, d);
    let mut nu_bar = DVector::zeros(d);
    let mut z = vec![0.0; d];
    for (ctx, weight) in points {
        let w = weight / total;
        let logged = propensity_fn(ctx)?;
        if logged.arms() != k {
            return Err(Error::DimensionMismatch { expected: k, got: logged.arms() });
        }
        let (f, e) = gh.model.predict_all(ctx);
        let mut nu = DVector::zeros(d);
        for a in 0..k {
            let pe = pi_e.prob(a);
            if pe == 0.0 {
                continue;
            }
            let p = logged.prob(a);
            if !(p > 0.0) {
                return Err(Error::FloorViolation { arm: a, prob: p });
            }
            gh.wm.z_into(ctx, a, &mut z)?;
            let eta: f64 = gh.theta_bar.iter().zip(&z).map(|(t, v)| t * v).sum();
            let psi = gh.wm.family.psi(eta);
            let coef = pe * c * (f[a] - psi);
            let resid_var = c * c * (e[a] - f[a] * f[a]);
            let tilt = w * pe * pe / p * resid_var;
            for j in 0..d {
                if z[j] == 0.0 {
                    continue;
                }
                nu[j] += coef * z[j];
                for i in 0..d {
                    second[(i, j)] += tilt * z[i] * z[j];
                }
            }
        }
        second += &nu * nu.transpose() * w;
        nu_bar += nu * w;
    }
    second -= &nu_bar * nu_bar.transpose();
    SymMatrix::symmetrized(second)
}

/// `(1/T) Σ s sᵀ`.
pub fn vhat_naive(score_samples: &[DVector<f64>]) -> Result<SymMatrix> {
    let first = score_samples.first().ok_or(Error::EmptyHistory)?;
    let d = first.len();
    let mut acc = DMatrix::zeros(d, d);
    for s in score_samples {
        if s.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: s.len() });
        }
        acc += s * s.transpose();
    }
    SymMatrix::symmetrized(acc / score_samples.len() as f64)
}

/// Brute-force `Var(s | H)`: the covariance of the augmented score over
/// `n_mc` fresh rounds with the policy and nuisance frozen.
#[allow(clippy::too_many_arguments)]
pub fn mc_score_variance<R: Rng + ?Sized>(
    wm: &WorkingModel,
    theta: &Theta,
    frozen_policy: &dyn Fn(&Context) -> Result<ActionDistribution>,
    pi_e: &ActionDistribution,
    scn: &Scenario,
    pool: &FeaturePool,
    snap: &dyn MomentModel,
    n_mc: usize,
    rng: &mut R,
) -> Result<SymMatrix> {
    if n_mc < 2 {
        return Err(Error::Domain(format!("need at least two Monte Carlo draws, got {n_mc}")));
    }
    let d = wm.dim();
    let t = snap.snapshot_time().max(1);
    let mut sum = DVector::zeros(d);
    let mut sum_sq = DMatrix::zeros(d, d);
    const CHUNK: usize = 8192;
    let mut done = 0;
    while done < n_mc {
        let m = CHUNK.min(n_mc - done);
        let mut batch = Vec::with_capacity(m);
        for _ in 0..m {
            let ctx = pool.context(rng.random_range(0..pool.len()));
            let logged = frozen_policy(&ctx)?;
            let arm = logged.arm_for_uniform(rng.random::<f64>());
            let noise: f64 = StandardNormal.sample(rng);
            let y = scn.observed_outcome(&ctx, arm, pool, noise)?;
            batch.push(Observation { t, ctx, arm, y, logged_dist: logged, split: SplitFlag(false), snapshot_id: 0 });
        }
        let data = ScoreData::new(wm, &batch, &[snap], pi_e)?;
        for i in 0..m {
            let s = data.score_term(i, theta)?;
            sum_sq += &s * s.transpose();
            sum += s;
        }
        done += m;
    }
    let n = n_mc as f64;
    let mean = sum / n;
    let cov = sum_sq / n - &mean * mean.transpose();
    SymMatrix::symmetrized(cov)
}

/// Piecewise-constant `V̂_t` over time blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct VHatSequence {
    starts: Vec<usize>,
    matrices: Vec<SymMatrix>,
    inv_sqrt: Vec<SymMatrix>,
    excluded: Vec<bool>,
}

impl VHatSequence {
    /// Block `b` covers `starts[b] <= t < starts[b + 1]`.
    pub fn new(starts: Vec<usize>, matrices: Vec<SymMatrix>, eigen_floor: f64) -> Result<Self> {
        if starts.is_empty() || starts.len() != matrices.len() {
            return Err(Error::DimensionMismatch { expected: starts.len(), got: matrices.len() });
        }
        if starts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain("block starts must be strictly increasing".into()));
        }
        let d = matrices[0].dim();
        if let Some(m) = matrices.iter().find(|m| m.dim() != d) {
            return Err(Error::DimensionMismatch { expected: d, got: m.dim() });
        }
        let inv_sqrt = matrices.iter().map(|m| sym_inv_sqrt(m, eigen_floor)).collect::<Result<_>>()?;
        let excluded = vec![false; starts.len()];
        Ok(Self { starts, matrices, inv_sqrt, excluded })
    }

    /// A single block with the identity.
    pub fn identity(dim: usize, start: usize) -> Self {
        Self {
            starts: vec![start],
            matrices: vec![SymMatrix::identity(dim)],
            inv_sqrt: vec![SymMatrix::identity(dim)],
            excluded: vec![false],
        }
    }

    /// Gives the flagged blocks zero weight. At least one block must remain.
    pub fn with_excluded(mut self, excluded: &[bool]) -> Result<Self> {
        if excluded.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), got: excluded.len() });
        }
        if excluded.iter().all(|e| *e) {
            return Err(Error::Domain("every variance block is excluded".into()));
        }
        let d = self.dim();
        for (b, e) in excluded.iter().enumerate() {
            if *e {
                self.inv_sqrt[b] = SymMatrix::zeros(d);
            }
        }
        self.excluded = excluded.to_vec();
        Ok(self)
    }

    pub fn is_excluded(&self, block: usize) -> bool {
        self.excluded[block]
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrices[0].dim()
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn matrix(&self, block: usize) -> &SymMatrix {
        &self.matrices[block]
    }

    pub fn inv_sqrt(&self, block: usize) -> &SymMatrix {
        &self.inv_sqrt[block]
    }

    /// Index of the block containing time `t`.
    pub fn block_of(&self, t: usize) -> Result<usize> {
        match self.starts.partition_point(|s| *s <= t) {
            0 => Err(Error::Domain(format!("t={t} precedes the first variance block at {}", self.starts[0]))),
            b => Ok(b - 1),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::NoiseMode;
    use crate::mestim::Family;
    use crate::nuisance::ScenarioMoments;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Const(Vec<f64>, Vec<f64>);

    impl MomentModel for Const {
        fn arms(&self) -> usize {
            self.0.len()
        }
        fn mean(&self, _: &Context, a: usize) -> f64 {
            self.0[a]
        }
        fn second_moment(&self, _: &Context, a: usize) -> f64 {
            self.1[a]
        }
    }

    fn ctx() -> Context {
        Context::new(vec![0.0], 0)
    }

    #[test]
    fn calibrated_model_has_zero_g() {
        let wm = WorkingModel::one_hot(Family::Linear, 2);
        let th = DVector::from_vec(vec![1.0, 2.0]);
        let m = Const(vec![1.0, 2.0], vec![2.0, 5.0]);
        let gh = GHPredictors::new(&wm, &th, &m).unwrap();
        assert_eq!(glm_g(&gh, &ctx(), 0).unwrap().norm(), 0.0);
        let half = ActionDistribution::unfloored(vec![0.5, 0.5]).unwrap();
        assert_eq!(nu_hat(&gh, &half, &ctx()).unwrap().norm(), 0.0);
    }

    #[test]
    fn one_hot_g_is_sparse() {
        let wm = WorkingModel::one_hot(Family::Linear, 3);
        let th = DVector::zeros(3);
        let m = Const(vec![1.0, 2.0, 3.0], vec![2.0, 5.0, 10.0]);
        let gh = GHPredictors::new(&wm, &th, &m).unwrap();
        let g = glm_g(&gh, &ctx(), 1).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 4.0, 0.0]);
    }

    #[test]
    fn nu_hat_example() {
        // Logistic with θ̄ = 0 gives ψ = 1/2, so g = (f − 1/2) z.
        let wm = WorkingModel::one_hot(Family::Logistic, 2);
        let th = DVector::zeros(2);
        let m = Const(vec![1.5, 1.5], vec![3.0, 3.0]);
        let gh = GHPredictors::new(&wm, &th, &m).unwrap();
        let half = ActionDistribution::unfloored(vec![0.5, 0.5]).unwrap();
        assert_eq!(nu_hat(&gh, &half, &ctx()).unwrap().as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn vhat_pool_identity_case() {
        // Linear, calibrated, e − f² = 1/4 so c²(e − f²) = 1.
        let wm = WorkingModel::one_hot(Family::Linear, 2);
        let th = DVector::zeros(2);
        let m = Const(vec![0.0, 0.0], vec![0.25, 0.25]);
        let gh = GHPredictors::new(&wm, &th, &m).unwrap();
        let half = ActionDistribution::unfloored(vec![0.5, 0.5]).unwrap();
        let pts = vec![ctx(); 3];
        let v = vhat_pool(&gh, &half, &pts, &|_| Ok(half.clone())).unwrap();
        assert_abs_diff_eq!(v.as_matrix(), &DMatrix::from_diagonal_element(2, 2, 0.5), epsilon = 1e-14);
    }

    #[test]
    fn vhat_pool_single_point() {
        let wm = WorkingModel::one_hot(Family::Linear, 2);
        let th = DVector::zeros(2);
        let m = Const(vec![0.0, 0.0], vec![1.0, 1.0]);
        let gh = GHPredictors::new(&wm, &th, &m).unwrap();
        let pe = ActionDistribution::unfloored(vec![0.4, 0.6]).unwrap();
        let logged = ActionDistribution::unfloored(vec![0.8, 0.2]).unwrap();
        let v = vhat_pool(&gh, &pe, &[ctx()], &|_| Ok(logged.clone())).unwrap();
        let mut expect = DMatrix::zeros(2, 2);
        for a in 0..2 {
            expect += glm_h(&gh, &ctx(), a).unwrap().into_matrix() * (pe.prob(a).powi(2) / logged.prob(a));
        }
        assert_abs_diff_eq!(v.as_matrix(), &expect, epsilon = 1e-12);
    }

    #[test]
    fn vhat_pool_empty() {
        let wm = WorkingModel::one_hot(Family::Linear, 1);
        let th = DVector::zeros(1);
        let m = Const(vec![0.0], vec![1.0]);
        let gh = GHPredictors::new(&wm, &th, &m).unwrap();
        let one = ActionDistribution::unfloored(vec![1.0]).unwrap();
        assert!(matches!(vhat_pool(&gh, &one, &[], &|_| Ok(one.clone())), Err(Error::EmptyPool)));
    }

    #[test]
    fn vhat_naive_examples() {
        let v = vhat_naive(&[DVector::from_vec(vec![-2.0, 0.0])]).unwrap();
        assert_eq!(v.as_matrix(), &DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 0.0]));
        let v = vhat_naive(&[DVector::zeros(3), DVector::zeros(3)]).unwrap();
        assert_eq!(v.op_norm(), 0.0);
        assert!(vhat_naive(&[]).is_err());
    }

    #[test]
    fn deterministic_outcome_has_tiny_variance() {
        // Single arm, single context, near-degenerate noise and exact nuisance.
        let scn = Scenario::new(vec![2.0], vec![0.0], vec![1.0], 1e-6, NoiseMode::Homoskedastic).unwrap();
        let pool = FeaturePool::new(vec![vec![0.0]], vec![0.0], vec![1.0]).unwrap();
        let wm = WorkingModel::one_hot(Family::Linear, 1);
        let truth = ScenarioMoments { scenario: &scn, pool: &pool };
        let one = ActionDistribution::unfloored(vec![1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let th = DVector::from_vec(vec![2.0]);
        let v = mc_score_variance(&wm, &th, &|_| Ok(one.clone()), &one, &scn, &pool, &truth, 2000, &mut rng).unwrap();
        assert!(v.op_norm() < 1e-10);
    }

    #[test]
    fn sequence_lookup() {
        let seq = VHatSequence::new(
            vec![1, 101, 201],
            vec![SymMatrix::identity(2), SymMatrix::from_diagonal(&[4.0, 4.0]).unwrap(), SymMatrix::identity(2)],
            1e-6,
        )
        .unwrap();
        assert_eq!(seq.block_of(1).unwrap(), 0);
        assert_eq!(seq.block_of(100).unwrap(), 0);
        assert_eq!(seq.block_of(101).unwrap(), 1);
        assert_eq!(seq.block_of(5000).unwrap(), 2);
        assert!(seq.block_of(0).is_err());
        assert_abs_diff_eq!(seq.inv_sqrt(1).get(0, 0), 0.5, epsilon = 1e-12);
        assert!(VHatSequence::new(vec![5, 5], vec![SymMatrix::identity(1), SymMatrix::identity(1)], 1e-6).is_err());
    }

    #[test]
    fn excluded_blocks_have_zero_weight() {
        let seq = VHatSequence::new(vec![1, 101], vec![SymMatrix::identity(2), SymMatrix::identity(2)], 1e-6)
            .unwrap()
            .with_excluded(&[true, false])
            .unwrap();
        assert!(seq.is_excluded(0));
        assert_eq!(seq.inv_sqrt(0).op_norm(), 0.0);
        assert_eq!(seq.inv_sqrt(1).get(1, 1), 1.0);
        let all = VHatSequence::identity(2, 1).with_excluded(&[true]);
        assert!(all.is_err());
    }
}

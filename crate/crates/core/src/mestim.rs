//! Working models, the augmented score and the point-estimate solvers.
//!
//! The criterion `m` is stored as a reward (a negated loss), so every target
//! is an argmax and every score is a gradient of something being maximized.
//! For both families the score has the form
//!
//! ```text
//! ṁ(a, x, y; θ) = c · (y − ψ(θᵀz)) · z,     z = z(x, a)
//! m̈(a, x; θ)    = −c · ψ'(θᵀz) · z zᵀ
//! ```
//!
//! with `c = 2, ψ = id` for least squares and `c = 1, ψ = σ` for logistic
//! regression. The Hessian does not depend on `y`, which makes the derivative
//! of the augmented score independent of the outcome and the propensity.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::env::{Context, FeaturePool, Scenario, SplitFlag};
use crate::error::{Error, Result};
use crate::mathkit::SymMatrix;
use crate::nuisance::MomentModel;
use crate::policies::ActionDistribution;

pub type Theta = DVector<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Linear,
    Logistic,
}

impl Family {
    /// Score scale `c`.
    pub fn scale(self) -> f64 {
        match self {
            Self::Linear => 2.0,
            Self::Logistic => 1.0,
        }
    }

    /// Inverse link.
    pub fn psi(self, eta: f64) -> f64 {
        match self {
            Self::Linear => eta,
            Self::Logistic => sigmoid(eta),
        }
    }

    pub fn psi_prime(self, eta: f64) -> f64 {
        match self {
            Self::Linear => 1.0,
            Self::Logistic => {
                let s = sigmoid(eta);
                s * (1.0 - s)
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Map from `(context, arm)` to the regressor vector `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureMap {
    /// `z = e_a`: one parameter per arm.
    OneHot,
    /// `z = (1, level_a)`: a line through numeric arm levels.
    ArmLevels { levels: Vec<f64> },
    /// `z = e_a ⊗ (1, x)`: a separate affine model in the features per arm.
    OneHotInteract,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkingModel {
    pub family: Family,
    pub features: FeatureMap,
    arms: usize,
    context_dim: usize,
}

impl WorkingModel {
    pub fn new(family: Family, features: FeatureMap, arms: usize, context_dim: usize) -> Result<Self> {
        if arms == 0 {
            return Err(Error::Config("working model needs at least one arm".into()));
        }
        if let FeatureMap::ArmLevels { levels } = &features {
            if levels.len() != arms {
                return Err(Error::DimensionMismatch { expected: arms, got: levels.len() });
            }
        }
        Ok(Self { family, features, arms, context_dim })
    }

    pub fn one_hot(family: Family, arms: usize) -> Self {
        Self { family, features: FeatureMap::OneHot, arms, context_dim: 0 }
    }

    pub fn arms(&self) -> usize {
        self.arms
    }

    /// Parameter dimension `d`.
    pub fn dim(&self) -> usize {
        match self.features {
            FeatureMap::OneHot => self.arms,
            FeatureMap::ArmLevels { .. } => 2,
            FeatureMap::OneHotInteract => self.arms * (1 + self.context_dim),
        }
    }

    /// Writes `z(ctx, arm)` into `out`, which must have length `d`.
    pub fn z_into(&self, ctx: &Context, arm: usize, out: &mut [f64]) -> Result<()> {
        if arm >= self.arms {
            return Err(Error::ArmOutOfRange { arm, arms: self.arms });
        }
        out.fill(0.0);
        match &self.features {
            FeatureMap::OneHot => out[arm] = 1.0,
            FeatureMap::ArmLevels { levels } => {
                out[0] = 1.0;
                out[1] = levels[arm];
            }
            FeatureMap::OneHotInteract => {
                let p = self.context_dim;
                if ctx.features.len() != p {
                    return Err(Error::DimensionMismatch { expected: p, got: ctx.features.len() });
                }
                let base = arm * (1 + p);
                out[base] = 1.0;
                out[base + 1..base + 1 + p].copy_from_slice(&ctx.features);
            }
        }
        Ok(())
    }

    pub fn z(&self, ctx: &Context, arm: usize) -> Result<DVector<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.z_into(ctx, arm, &mut out)?;
        Ok(DVector::from_vec(out))
    }

    fn check_y(&self, y: f64) -> Result<()> {
        if !y.is_finite() {
            return Err(Error::Domain(format!("non-finite outcome {y}")));
        }
        if self.family == Family::Logistic && !(0.0..=1.0).contains(&y) {
            return Err(Error::LogisticOutcome(y));
        }
        Ok(())
    }

    fn eta(&self, theta: &Theta, z: &[f64]) -> Result<f64> {
        if theta.len() != z.len() {
            return Err(Error::DimensionMismatch { expected: z.len(), got: theta.len() });
        }
        Ok(theta.iter().zip(z).map(|(t, v)| t * v).sum())
    }

    fn value_z(&self, theta: &Theta, z: &[f64], y: f64) -> Result<f64> {
        self.check_y(y)?;
        let eta = self.eta(theta, z)?;
        Ok(match self.family {
            Family::Linear => -(y - eta).powi(2),
            Family::Logistic => y * eta - softplus(eta),
        })
    }

    /// Multiplier `c (y − ψ(η))` of `z` in the gradient.
    fn grad_coef(&self, theta: &Theta, z: &[f64], y: f64) -> Result<f64> {
        self.check_y(y)?;
        let eta = self.eta(theta, z)?;
        Ok(self.family.scale() * (y - self.family.psi(eta)))
    }

    /// Multiplier `−c ψ'(η)` of `z zᵀ` in the Hessian.
    fn hess_coef(&self, theta: &Theta, z: &[f64]) -> Result<f64> {
        let eta = self.eta(theta, z)?;
        Ok(-self.family.scale() * self.family.psi_prime(eta))
    }

    pub fn m_value(&self, theta: &Theta, ctx: &Context, arm: usize, y: f64) -> Result<f64> {
        let z = self.z(ctx, arm)?;
        self.value_z(theta, z.as_slice(), y)
    }

    pub fn m_grad(&self, theta: &Theta, ctx: &Context, arm: usize, y: f64) -> Result<DVector<f64>> {
        let z = self.z(ctx, arm)?;
        let c = self.grad_coef(theta, z.as_slice(), y)?;
        Ok(z * c)
    }

    pub fn m_hess(&self, theta: &Theta, ctx: &Context, arm: usize, y: f64) -> Result<SymMatrix> {
        self.check_y(y)?;
        let z = self.z(ctx, arm)?;
        let c = self.hess_coef(theta, z.as_slice())?;
        SymMatrix::new(&z * z.transpose() * c)
    }
}

/// One logged round.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub t: usize,
    pub ctx: Context,
    pub arm: usize,
    pub y: f64,
    pub logged_dist: ActionDistribution,
    pub split: SplitFlag,
    /// Index into the snapshot list passed alongside the history.
    pub snapshot_id: usize,
}

impl Observation {
    pub fn propensity(&self) -> f64 {
        self.logged_dist.prob(self.arm)
    }
}

/// Per-round quantities that do not depend on `θ`.
#[derive(Debug, Clone)]
struct Row {
    /// `K × d` regressors, row-major by arm.
    z: Vec<f64>,
    /// Nuisance mean per arm.
    f: Vec<f64>,
    t: usize,
    arm: usize,
    y: f64,
    /// `πe(A) / P(A)`
    w: f64,
    propensity: f64,
}

/// The augmented score problem for one history, with regressors and nuisance
/// predictions evaluated once.
#[derive(Debug, Clone)]
pub struct ScoreData {
    wm: WorkingModel,
    pi_e: Vec<f64>,
    rows: Vec<Row>,
}

fn check_eval_policy(wm: &WorkingModel, pi_e: &ActionDistribution) -> Result<()> {
    if pi_e.arms() != wm.arms() {
        return Err(Error::DimensionMismatch { expected: wm.arms(), got: pi_e.arms() });
    }
    Ok(())
}

impl ScoreData {
    /// `snapshots[obs.snapshot_id]` supplies `f_t` for each observation and
    /// must have been fitted strictly before `obs.t`.
    pub fn new(
        wm: &WorkingModel,
        history: &[Observation],
        snapshots: &[&dyn MomentModel],
        pi_e: &ActionDistribution,
    ) -> Result<Self> {
        check_eval_policy(wm, pi_e)?;
        let (k, d) = (wm.arms(), wm.dim());
        let mut rows = Vec::with_capacity(history.len());
        for obs in history {
            let snap = *snapshots
                .get(obs.snapshot_id)
                .ok_or(Error::DimensionMismatch { expected: snapshots.len(), got: obs.snapshot_id })?;
            if snap.snapshot_time() > obs.t {
                return Err(Error::Domain(format!(
                    "snapshot fitted through t={} used at t={}",
                    snap.snapshot_time(),
                    obs.t
                )));
            }
            if obs.arm >= k {
                return Err(Error::ArmOutOfRange { arm: obs.arm, arms: k });
            }
            wm.check_y(obs.y)?;
            let propensity = obs.propensity();
            if !(propensity > 0.0) {
                return Err(Error::FloorViolation { arm: obs.arm, prob: propensity });
            }
            let mut z = vec![0.0; k * d];
            for a in 0..k {
                wm.z_into(&obs.ctx, a, &mut z[a * d..(a + 1) * d])?;
            }
            let (f, _) = snap.predict_all(&obs.ctx);
            if let Some(arm) = f.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinitePrediction { arm });
            }
            rows.push(Row { z, f, t: obs.t, arm: obs.arm, y: obs.y, w: pi_e.prob(obs.arm) / propensity, propensity });
        }
        Ok(Self { wm: wm.clone(), pi_e: pi_e.probs().to_vec(), rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn model(&self) -> &WorkingModel {
        &self.wm
    }

    fn z<'a>(&self, row: &'a Row, arm: usize) -> &'a [f64] {
        let d = self.wm.dim();
        &row.z[arm * d..(arm + 1) * d]
    }

    /// Augmented score of round `i` at `θ`.
    pub fn score_term(&self, i: usize, theta: &Theta) -> Result<DVector<f64>> {
        let row = &self.rows[i];
        let mut s = DVector::zeros(self.wm.dim());
        for (a, pe) in self.pi_e.iter().enumerate() {
            if *pe == 0.0 {
                continue;
            }
            let z = self.z(row, a);
            let c = self.wm.grad_coef(theta, z, row.f[a])?;
            axpy(&mut s, pe * c, z);
        }
        if row.w != 0.0 {
            let z = self.z(row, row.arm);
            let c = self.wm.family.scale() * (row.y - row.f[row.arm]);
            axpy(&mut s, row.w * c, z);
        }
        Ok(s)
    }

    /// Derivative of [`ScoreData::score_term`] in `θ`.
    pub fn score_grad_term(&self, i: usize, theta: &Theta) -> Result<DMatrix<f64>> {
        let row = &self.rows[i];
        let d = self.wm.dim();
        let mut h = DMatrix::zeros(d, d);
        for (a, pe) in self.pi_e.iter().enumerate() {
            if *pe == 0.0 {
                continue;
            }
            let z = self.z(row, a);
            let c = self.wm.hess_coef(theta, z)?;
            syr(&mut h, pe * c, z);
        }
        Ok(h)
    }

    /// `(Σ_t s_t, Σ_t ṡ_t)`
    pub fn score_sums(&self, theta: &Theta) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let d = self.wm.dim();
        let mut s = DVector::zeros(d);
        let mut h = DMatrix::zeros(d, d);
        for i in 0..self.rows.len() {
            s += self.score_term(i, theta)?;
            h += self.score_grad_term(i, theta)?;
        }
        Ok((s, h))
    }

    /// The augmented objective summed over rounds.
    pub fn objective(&self, theta: &Theta) -> Result<f64> {
        let mut total = 0.0;
        for row in &self.rows {
            for (a, pe) in self.pi_e.iter().enumerate() {
                if *pe != 0.0 {
                    total += pe * self.wm.value_z(theta, self.z(row, a), row.f[a])?;
                }
            }
            if row.w != 0.0 {
                let z = self.z(row, row.arm);
                let diff = self.wm.value_z(theta, z, row.y)? - self.wm.value_z(theta, z, row.f[row.arm])?;
                total += row.w * diff;
            }
        }
        Ok(total)
    }

    /// Root of `Σ_t s_t(θ)` by damped Newton from `θ = 0`.
    pub fn solve(&self, tol: f64, max_iter: usize) -> Result<Theta> {
        if self.rows.is_empty() {
            return Err(Error::EmptyHistory);
        }
        newton_solve(|th| self.score_sums(th), DVector::zeros(self.wm.dim()), self.rows.len() as f64, tol, max_iter)
    }

    /// Inverse-propensity-weighted M-estimate and its sandwich covariance.
    pub fn ipw_fit(&self, tol: f64, max_iter: usize) -> Result<(Theta, SymMatrix)> {
        let n = self.rows.len();
        if n == 0 {
            return Err(Error::EmptyHistory);
        }
        let theta = newton_solve(|th| self.ipw_sums(th), DVector::zeros(self.wm.dim()), n as f64, tol, max_iter)?;
        let d = self.wm.dim();
        let (_, j) = self.ipw_sums(&theta)?;
        let mut omega = DMatrix::zeros(d, d);
        for row in &self.rows {
            if row.w == 0.0 {
                continue;
            }
            let z = self.z(row, row.arm);
            let c = self.wm.grad_coef(&theta, z, row.y)?;
            syr(&mut omega, (row.w * c).powi(2), z);
        }
        let nf = n as f64;
        let j = j / nf;
        let omega = omega / nf;
        let j_inv = j.try_inverse().ok_or(Error::Singular("IPW Hessian"))?;
        let cov = &j_inv * omega * j_inv.transpose() / nf;
        Ok((theta, SymMatrix::symmetrized(cov)?))
    }

    fn ipw_sums(&self, theta: &Theta) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let d = self.wm.dim();
        let mut s = DVector::zeros(d);
        let mut h = DMatrix::zeros(d, d);
        for row in &self.rows {
            if row.w == 0.0 {
                continue;
            }
            let z = self.z(row, row.arm);
            axpy(&mut s, row.w * self.wm.grad_coef(theta, z, row.y)?, z);
            syr(&mut h, row.w * self.wm.hess_coef(theta, z)?, z);
        }
        Ok((s, h))
    }

    /// Time index of round `i`.
    pub fn time(&self, i: usize) -> usize {
        self.rows[i].t
    }

    /// Logged propensity of round `i`.
    pub fn propensity(&self, i: usize) -> f64 {
        self.rows[i].propensity
    }
}

fn axpy(s: &mut DVector<f64>, alpha: f64, z: &[f64]) {
    for (si, zi) in s.iter_mut().zip(z) {
        *si += alpha * zi;
    }
}

/// `h += alpha z zᵀ`
fn syr(h: &mut DMatrix<f64>, alpha: f64, z: &[f64]) {
    let d = z.len();
    for j in 0..d {
        let zj = z[j];
        if zj == 0.0 {
            continue;
        }
        for i in 0..d {
            h[(i, j)] += alpha * z[i] * zj;
        }
    }
}

/// Damped Newton on `F(θ) = 0` given `(F, ∂F)`.
///
/// Stops once `‖F‖∞ / scale ≤ tol`. Each step is halved (up to 30 times)
/// until the residual norm drops; a singular Jacobian is ridge-regularized.
pub fn newton_solve<G>(eval: G, theta0: Theta, scale: f64, tol: f64, max_iter: usize) -> Result<Theta>
where
    G: Fn(&Theta) -> Result<(DVector<f64>, DMatrix<f64>)>,
{
    let mut theta = theta0;
    let (mut f, mut jac) = eval(&theta)?;
    let resid = |f: &DVector<f64>| f.amax() / scale;
    for _ in 0..max_iter {
        if !f.iter().all(|v| v.is_finite()) {
            return Err(Error::NoConvergence { iterations: 0, residual: f64::NAN });
        }
        if resid(&f) <= tol {
            return Ok(theta);
        }
        let step = newton_step(&jac, &f)?;
        let base = f.norm();
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=30 {
            let cand = &theta - &step * t;
            let (fc, jc) = eval(&cand)?;
            if fc.iter().all(|v| v.is_finite()) && fc.norm() < base {
                accepted = Some((cand, fc, jc));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((c, fc, jc)) => {
                theta = c;
                f = fc;
                jac = jc;
            }
            None => break,
        }
    }
    if resid(&f) <= tol {
        return Ok(theta);
    }
    Err(Error::NoConvergence { iterations: max_iter, residual: resid(&f) })
}

fn newton_step(jac: &DMatrix<f64>, f: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(s) = jac.clone().lu().solve(f) {
        if s.iter().all(|v| v.is_finite()) {
            return Ok(s);
        }
    }
    let scale = jac.amax().max(1.0);
    for ridge in [1e-10, 1e-8, 1e-6, 1e-4] {
        let reg = jac - DMatrix::identity(jac.nrows(), jac.ncols()) * (ridge * scale);
        if let Some(s) = reg.lu().solve(f) {
            if s.iter().all(|v| v.is_finite()) {
                return Ok(s);
            }
        }
    }
    Err(Error::Singular("Newton step"))
}

/// Default solver tolerance on the mean absolute score.
pub const DEFAULT_TOL: f64 = 1e-8;
/// Default Newton iteration cap.
pub const DEFAULT_MAX_ITER: usize = 100;

/// `θ̃`: the root of the summed augmented score.
pub fn solve_tilde_theta(
    wm: &WorkingModel,
    history: &[Observation],
    snapshots: &[&dyn MomentModel],
    pi_e: &ActionDistribution,
    tol: f64,
    max_iter: usize,
) -> Result<Theta> {
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    ScoreData::new(wm, history, snapshots, pi_e)?.solve(tol, max_iter)
}

/// Sum over rounds of the augmented objective.
pub fn maipwm_objective(
    wm: &WorkingModel,
    theta: &Theta,
    history: &[Observation],
    snapshots: &[&dyn MomentModel],
    pi_e: &ActionDistribution,
) -> Result<f64> {
    ScoreData::new(wm, history, snapshots, pi_e)?.objective(theta)
}

/// Augmented score of a single round.
pub fn score_term(
    wm: &WorkingModel,
    theta: &Theta,
    obs: &Observation,
    snap: &dyn MomentModel,
    pi_e: &ActionDistribution,
) -> Result<DVector<f64>> {
    let obs = Observation { snapshot_id: 0, ..obs.clone() };
    ScoreData::new(wm, std::slice::from_ref(&obs), &[snap], pi_e)?.score_term(0, theta)
}

/// Derivative in `θ` of a single round's augmented score.
pub fn score_grad_term(
    wm: &WorkingModel,
    theta: &Theta,
    obs: &Observation,
    snap: &dyn MomentModel,
    pi_e: &ActionDistribution,
) -> Result<DMatrix<f64>> {
    let obs = Observation { snapshot_id: 0, ..obs.clone() };
    ScoreData::new(wm, std::slice::from_ref(&obs), &[snap], pi_e)?.score_grad_term(0, theta)
}

/// IPW estimate with weights `πe(A)/P(A)` and its sandwich covariance.
pub fn ipw_fit(
    wm: &WorkingModel,
    history: &[Observation],
    pi_e: &ActionDistribution,
) -> Result<(Theta, SymMatrix)> {
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    // Nuisance values never enter the IPW score.
    let zero = ZeroModel(wm.arms());
    let hist: Vec<Observation> = history.iter().map(|o| Observation { snapshot_id: 0, ..o.clone() }).collect();
    ScoreData::new(wm, &hist, &[&zero], pi_e)?.ipw_fit(DEFAULT_TOL, DEFAULT_MAX_ITER)
}

struct ZeroModel(usize);

impl MomentModel for ZeroModel {
    fn arms(&self) -> usize {
        self.0
    }
    fn mean(&self, _: &Context, _: usize) -> f64 {
        0.0
    }
    fn second_moment(&self, _: &Context, _: usize) -> f64 {
        0.0
    }
}

/// The population target `θ*`: the maximizer of the exact expected
/// criterion over the pool under `πe`.
pub fn projection_oracle(
    wm: &WorkingModel,
    scn: &Scenario,
    pool: &FeaturePool,
    pi_e: &ActionDistribution,
) -> Result<Theta> {
    check_eval_policy(wm, pi_e)?;
    if scn.arms != wm.arms() {
        return Err(Error::DimensionMismatch { expected: wm.arms(), got: scn.arms });
    }
    let (k, d) = (wm.arms(), wm.dim());
    // (weight, z, E[Y]) per pool row and arm.
    let mut cells = Vec::with_capacity(pool.len() * k);
    let n = pool.len() as f64;
    for ctx in pool.contexts() {
        for a in 0..k {
            let pe = pi_e.prob(a);
            if pe == 0.0 {
                continue;
            }
            let mean = scn.observed_moments(&ctx, a, pool)?.0;
            cells.push((pe / n, wm.z(&ctx, a)?, mean));
        }
    }
    let eval = |theta: &Theta| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let mut s = DVector::zeros(d);
        let mut h = DMatrix::zeros(d, d);
        for (w, z, mean) in &cells {
            let zs = z.as_slice();
            axpy(&mut s, w * wm.grad_coef(theta, zs, *mean)?, zs);
            syr(&mut h, w * wm.hess_coef(theta, zs)?, zs);
        }
        Ok((s, h))
    };
    let (_, h0) = eval(&DVector::zeros(d))?;
    if h0.clone().lu().solve(&DVector::from_element(d, 1.0)).is_none()
        || SymMatrix::symmetrized(-h0)?.eigenvalues()[0] <= 1e-12
    {
        return Err(Error::Singular("projection design"));
    }
    newton_solve(eval, DVector::zeros(d), 1.0, 1e-10, 200)
}

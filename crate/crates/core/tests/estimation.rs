use std::sync::Arc;

use maipwm::env::{Context, FeaturePool, NoiseMode, Scenario, SplitFlag};
use maipwm::mathkit::SymMatrix;
use maipwm::mestim::{
    maipwm_objective, projection_oracle, score_term, solve_tilde_theta, Family, FeatureMap, Observation, ScoreData,
    Theta, WorkingModel, DEFAULT_MAX_ITER,
};
use maipwm::nuisance::{MomentModel, NeighborIndex, NuisanceConfig, NuisanceState};
use maipwm::policies::ActionDistribution;
use maipwm::varest::{vhat_pool, GHPredictors, VHatSequence};
use nalgebra::DVector;
use proptest::prelude::*;

const ARMS: usize = 3;

/// Smooth nuisance with means in `(0, 1)`, valid for both families.
struct Smooth(f64);

impl MomentModel for Smooth {
    fn arms(&self) -> usize {
        ARMS
    }
    fn mean(&self, ctx: &Context, arm: usize) -> f64 {
        0.4 + 0.1 * arm as f64 + 0.2 * (self.0 * ctx.features[0]).tanh()
    }
    fn second_moment(&self, ctx: &Context, arm: usize) -> f64 {
        self.mean(ctx, arm)
    }
}

fn family() -> impl Strategy<Value = Family> {
    prop_oneof![Just(Family::Linear), Just(Family::Logistic)]
}

/// `(x, arm, y-uniform, logged probs)` rows.
fn rows() -> impl Strategy<Value = Vec<(f64, usize, f64, [f64; 3])>> {
    prop::collection::vec(
        (-2.0..2.0f64, 0..ARMS, 0.0..1.0f64, (0.1..1.0f64, 0.1..1.0f64, 0.1..1.0f64)),
        5..40,
    )
    .prop_map(|v| {
        v.into_iter()
            .map(|(x, a, u, (p, q, r))| {
                let s = p + q + r;
                (x, a, u, [p / s, q / s, r / s])
            })
            .collect()
    })
}

fn history(family: Family, rows: &[(f64, usize, f64, [f64; 3])]) -> Vec<Observation> {
    rows.iter()
        .enumerate()
        .map(|(i, (x, a, u, p))| Observation {
            t: i + 1,
            ctx: Context::new(vec![*x], i),
            arm: *a,
            y: match family {
                Family::Linear => 4.0 * u - 2.0 + x,
                Family::Logistic => f64::from(u8::from(*u < 0.5 + 0.2 * x.tanh())),
            },
            logged_dist: ActionDistribution::unfloored(p.to_vec()).unwrap(),
            split: SplitFlag(false),
            snapshot_id: 0,
        })
        .collect()
}

fn pi_e() -> ActionDistribution {
    ActionDistribution::unfloored(vec![0.2, 0.5, 0.3]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn objective_gradient_is_summed_score(
        family in family(),
        rows in rows(),
        theta in prop::collection::vec(-1.0..1.0f64, 2 * ARMS),
    ) {
        let wm = WorkingModel::new(family, FeatureMap::OneHotInteract, ARMS, 1).unwrap();
        let hist = history(family, &rows);
        let snap = Smooth(1.3);
        let snaps: [&dyn MomentModel; 1] = [&snap];
        let theta = Theta::from_vec(theta);
        let (sum, _) = ScoreData::new(&wm, &hist, &snaps, &pi_e()).unwrap().score_sums(&theta).unwrap();
        let obj = |t: &Theta| maipwm_objective(&wm, t, &hist, &snaps, &pi_e()).unwrap();
        // Richardson-extrapolated central differences.
        let diff = |j: usize, h: f64| {
            let mut p = theta.clone();
            let mut m = theta.clone();
            p[j] += h;
            m[j] -= h;
            (obj(&p) - obj(&m)) / (2.0 * h)
        };
        let fd = DVector::from_fn(wm.dim(), |j, _| (4.0 * diff(j, 5e-4) - diff(j, 1e-3)) / 3.0);
        let scale = sum.amax().max(1.0);
        prop_assert!((fd - &sum).amax() <= 1e-8 * scale);
    }

    #[test]
    fn solver_meets_first_order_condition(family in family(), rows in rows()) {
        let wm = WorkingModel::one_hot(family, ARMS);
        let hist = history(family, &rows);
        let snap = Smooth(0.7);
        let snaps: [&dyn MomentModel; 1] = [&snap];
        let tol = 1e-9;
        // Per arm the root solves ψ(θ_a) = mean of f_a + 1{A=a}(y − f_a)/P_a,
        // which has no finite solution outside the range of ψ.
        let attainable = family == Family::Linear
            || (0..ARMS).all(|a| {
                let target = hist
                    .iter()
                    .map(|o| {
                        let f = snap.mean(&o.ctx, a);
                        f + if o.arm == a { (o.y - f) / o.propensity() } else { 0.0 }
                    })
                    .sum::<f64>()
                    / hist.len() as f64;
                target > 1e-6 && target < 1.0 - 1e-6
            });
        match solve_tilde_theta(&wm, &hist, &snaps, &pi_e(), tol, DEFAULT_MAX_ITER) {
            Ok(theta) => {
                let (sum, _) = ScoreData::new(&wm, &hist, &snaps, &pi_e()).unwrap().score_sums(&theta).unwrap();
                prop_assert!(sum.amax() / hist.len() as f64 <= tol);
            }
            Err(e) => prop_assert!(!attainable, "solver failed on an attainable problem: {}", e),
        }
    }

    #[test]
    fn augmentation_has_mean_zero(
        family in family(),
        x in -2.0..2.0f64,
        y in 0.0..1.0f64,
        logged in (0.05..1.0f64, 0.05..1.0f64, 0.05..1.0f64),
        theta in prop::collection::vec(-1.0..1.0f64, 2 * ARMS),
    ) {
        let wm = WorkingModel::new(family, FeatureMap::OneHotInteract, ARMS, 1).unwrap();
        let y = if family == Family::Logistic { y.round() } else { y };
        let s = logged.0 + logged.1 + logged.2;
        let p = ActionDistribution::unfloored(vec![logged.0 / s, logged.1 / s, logged.2 / s]).unwrap();
        let theta = Theta::from_vec(theta);
        let ctx = Context::new(vec![x], 0);
        let snap = Smooth(2.0);
        let mut mean = DVector::zeros(wm.dim());
        for a in 0..ARMS {
            let obs = Observation { t: 1, ctx: ctx.clone(), arm: a, y, logged_dist: p.clone(), split: SplitFlag(false), snapshot_id: 0 };
            let ipw = wm.m_grad(&theta, &ctx, a, y).unwrap() * (pi_e().prob(a) / p.prob(a));
            let aug = score_term(&wm, &theta, &obs, &snap, &pi_e()).unwrap() - ipw;
            mean += aug * p.prob(a);
        }
        prop_assert!(mean.amax() <= 1e-12);
    }

    #[test]
    fn variance_estimates_are_symmetric(
        family in family(),
        rows in rows(),
        theta in prop::collection::vec(-1.0..1.0f64, 2 * ARMS),
        log_floor in -8.0..-2.0f64,
    ) {
        let wm = WorkingModel::new(family, FeatureMap::OneHotInteract, ARMS, 1).unwrap();
        let theta = Theta::from_vec(theta);
        let snap = Smooth(1.0);
        let gh = GHPredictors::new(&wm, &theta, &snap).unwrap();
        let contexts: Vec<Context> = rows.iter().enumerate().map(|(i, r)| Context::new(vec![r.0], i)).collect();
        let v = vhat_pool(&gh, &pi_e(), &contexts, &|c: &Context| {
            ActionDistribution::unfloored(rows[c.pool_index].3.to_vec())
        })
        .unwrap();
        let m = v.as_matrix();
        prop_assert!((m - m.transpose()).amax() <= 1e-12);
        let seq = VHatSequence::new(vec![1], vec![v], 10f64.powf(log_floor)).unwrap();
        prop_assert!(seq.inv_sqrt(0).eigenvalues().iter().all(|e| *e > 0.0));
    }
}

fn affine_pool(n: usize) -> FeaturePool {
    let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![(i as f64 / n as f64) * 4.0 - 2.0]).collect();
    let f: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    FeaturePool::new(rows, f, vec![1.0; n]).unwrap()
}

#[test]
fn correctly_specified_target_is_policy_free() {
    let pool = affine_pool(50);
    let scn = Scenario::new(vec![0.0, 1.0, -1.0], vec![1.0, 2.0, -0.5], vec![1.0; 3], 1.0, NoiseMode::Homoskedastic).unwrap();
    let wm = WorkingModel::new(Family::Linear, FeatureMap::OneHotInteract, 3, 1).unwrap();
    let base = projection_oracle(&wm, &scn, &pool, &ActionDistribution::uniform(3)).unwrap();
    for probs in [vec![0.2, 0.5, 0.3], vec![0.01, 0.01, 0.98], vec![0.6, 0.3, 0.1]] {
        let other = projection_oracle(&wm, &scn, &pool, &ActionDistribution::unfloored(probs).unwrap()).unwrap();
        assert!((other - &base).amax() <= 1e-8);
    }
}

#[test]
fn misspecified_target_depends_on_policy() {
    let pool = affine_pool(10);
    // Quadratic response in the arm level, fitted by a line.
    let scn = Scenario::new(vec![0.0, 1.0, 4.0], vec![0.0; 3], vec![1.0; 3], 1.0, NoiseMode::Homoskedastic).unwrap();
    let wm = WorkingModel::new(Family::Linear, FeatureMap::ArmLevels { levels: vec![0.0, 1.0, 2.0] }, 3, 1).unwrap();
    let a = projection_oracle(&wm, &scn, &pool, &ActionDistribution::unfloored(vec![0.5, 0.5, 0.0]).unwrap()).unwrap();
    let b = projection_oracle(&wm, &scn, &pool, &ActionDistribution::unfloored(vec![0.0, 0.5, 0.5]).unwrap()).unwrap();
    // Secant lines through (0, 0)-(1, 1) and (1, 1)-(2, 4).
    assert!((a - DVector::from_vec(vec![0.0, 1.0])).amax() < 1e-8);
    assert!((b - DVector::from_vec(vec![-2.0, 3.0])).amax() < 1e-8);
}

#[test]
fn held_out_variance_ignores_outcome_order_at_equal_contexts() {
    let pool = affine_pool(20);
    let index = Arc::new(NeighborIndex::from_pool(&pool).unwrap());
    let config = NuisanceConfig { k: 3, cadence: 1000, ..Default::default() };
    let train: Vec<(usize, usize, f64)> = (0..120).map(|i| (i % 20, i % 3, ((i * 37) % 11) as f64 / 3.0)).collect();
    let fit = |data: &[(usize, usize, f64)]| {
        let mut s = NuisanceState::new(3, Arc::clone(&index), config).unwrap();
        for (t, (site, arm, y)) in data.iter().enumerate() {
            s.update(t + 1, &pool.context(*site), *arm, *y).unwrap();
        }
        s.snapshot(data.len() + 1)
    };
    // Reverse the outcomes within each (site, arm) cell.
    let mut permuted = train.clone();
    for site in 0..20 {
        for arm in 0..3 {
            let idx: Vec<usize> = (0..train.len()).filter(|i| train[*i].0 == site && train[*i].1 == arm).collect();
            for (i, j) in idx.iter().zip(idx.iter().rev()) {
                permuted[*i].2 = train[*j].2;
            }
        }
    }
    assert_ne!(train, permuted);
    let wm = WorkingModel::new(Family::Linear, FeatureMap::OneHotInteract, 3, 1).unwrap();
    let theta = Theta::from_vec(vec![0.1, 0.2, -0.3, 0.4, 0.0, 1.0]);
    let held_out: Vec<Context> = (0..20).step_by(3).map(|i| pool.context(i)).collect();
    let vhat = |snap: &dyn MomentModel| -> SymMatrix {
        let gh = GHPredictors::new(&wm, &theta, snap).unwrap();
        vhat_pool(&gh, &pi_e(), &held_out, &|_: &Context| Ok(ActionDistribution::uniform(3))).unwrap()
    };
    let (a, b) = (vhat(&fit(&train)), vhat(&fit(&permuted)));
    assert!((a.as_matrix() - b.as_matrix()).amax() <= 1e-12);
}

use maipwm::env::{build_feature_pool, PoolSource, Surrogate, SurrogateFn};
use maipwm::harness::{external_contexts, parse_config, selfcheck, simulate, Experiment};
use maipwm::inference::{marginal_interval, region_contains, run_pipeline, ConfidenceRegion, MethodKind, PipelineInput, VariancePool};
use maipwm::mathkit::chi2_quantile;
use maipwm::mestim::Theta;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn shape(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-2.0..2.0f64, d * d)
        .prop_map(move |v| DMatrix::from_vec(d, d, v) + DMatrix::identity(d, d) * 3.0)
}

fn region() -> impl Strategy<Value = ConfidenceRegion> {
    (1usize..6).prop_flat_map(|d| {
        (prop::collection::vec(-5.0..5.0f64, d), shape(d), 0.01..0.5f64)
            .prop_map(|(c, b, alpha)| ConfidenceRegion::new(DVector::from_vec(c), b, alpha).unwrap())
    })
}

proptest! {
    #[test]
    fn region_contains_its_center(r in region()) {
        prop_assert!(region_contains(&r, &r.center).unwrap());
        prop_assert_eq!(r.radius, chi2_quantile(r.dim(), 1.0 - r.alpha).unwrap());
    }

    #[test]
    fn marginal_interval_supports_the_region(r in region(), eta_seed in prop::collection::vec(-1.0..1.0f64, 6), over in 1e-3..2.0f64) {
        let d = r.dim();
        let eta = DVector::from_iterator(d, eta_seed.into_iter().take(d)) + DVector::from_element(d, 0.05);
        let (lo, hi) = marginal_interval(&r, &eta).unwrap();
        // Direction along which ηᵀθ moves fastest per unit of the statistic.
        let gram = r.shape.transpose() * &r.shape;
        let dir = gram.lu().solve(&eta).unwrap();
        let step = (hi - lo) / 2.0 * (1.0 + over) / eta.dot(&dir);
        for sign in [1.0, -1.0] {
            let theta: Theta = &r.center + &dir * (sign * step);
            let v = eta.dot(&theta);
            prop_assert!(v < lo || v > hi);
            prop_assert!(!region_contains(&r, &theta).unwrap());
        }
        // The boundary point itself touches the region.
        let edge: Theta = &r.center + &dir * ((hi - lo) / 2.0 / eta.dot(&dir));
        prop_assert!((r.statistic(&edge).unwrap() - r.radius).abs() <= 1e-8 * r.radius.max(1.0));
    }
}

fn experiment(policy: &str, horizon: usize) -> Experiment {
    let cfg = parse_config(&format!(
        r#"
horizon = {horizon}
reps = 1
methods = ["maipwm_external"]
scenario = {{ preset = 2, arms = 3 }}
policy = {{ kind = "{policy}" }}
pool = {{ source = "synthetic", size = 300, dim = 3 }}
"#
    ))
    .unwrap();
    Experiment::prepare(cfg).unwrap()
}

#[test]
fn pipeline_solves_the_weighted_score() {
    for policy in ["thompson", "epsilon_greedy", "ucb"] {
        let exp = experiment(policy, 1200);
        let traj = simulate(&exp.world, 9, 0, 1200, None).unwrap();
        let split = simulate(&exp.world, 9, 0, 1200, Some(0.5)).unwrap();
        let external = external_contexts(&exp.world.pool, 9, 0, 1200);
        let input = PipelineInput::new(&exp.wm, &exp.pi_e, &traj.history, &traj.blocks, 0.2);
        let split_input = PipelineInput::new(&exp.wm, &exp.pi_e, &split.history, &split.blocks, 0.2);
        let runs = [
            (MethodKind::MaipwmExternal, input, VariancePool::External { contexts: &external, ratio: 1.0 }),
            (MethodKind::MaipwmReuse, input, VariancePool::Reuse),
            (MethodKind::MaipwmNaive, input, VariancePool::None),
            (MethodKind::MaipwmSplitting, split_input, VariancePool::Split { contexts: &split.held_out }),
        ];
        for (method, input, pool) in runs {
            for res in run_pipeline(method, &input, pool, &[400, 800, 1200]) {
                let res = res.unwrap();
                assert!(res.residual <= 1e-6, "{policy} {}: residual {}", method.name(), res.residual);
                assert!(region_contains(&res.region, &res.theta_hat).unwrap());
            }
        }
    }
}

#[test]
fn policies_act_only_on_past_data() {
    let exp = experiment("thompson", 1000);
    let traj = simulate(&exp.world, 2, 5, 1000, None).unwrap();
    for block in &traj.blocks {
        assert!(block.policy.model.snapshot_time() <= block.start);
    }
    for obs in &traj.history {
        let block = &traj.blocks[obs.snapshot_id];
        assert!(block.start <= obs.t);
        assert!(traj.blocks.get(obs.snapshot_id + 1).is_none_or(|next| obs.t < next.start));
    }
}

#[test]
fn simulation_is_reproducible() {
    let exp = experiment("thompson", 500);
    let a = simulate(&exp.world, 4, 3, 500, None).unwrap();
    let b = simulate(&exp.world, 4, 3, 500, None).unwrap();
    let c = simulate(&exp.world, 4, 4, 500, None).unwrap();
    let ys = |t: &maipwm::harness::Trajectory| t.history.iter().map(|o| (o.arm, o.y.to_bits())).collect::<Vec<_>>();
    assert_eq!(ys(&a), ys(&b));
    assert_ne!(ys(&a), ys(&c));
}

#[test]
fn tied_arms_have_equal_means() {
    let pool = build_feature_pool(
        &PoolSource::Synthetic { size: 200, dim: 4, seed: 1 },
        &Surrogate::ClosedForm { mean: SurrogateFn::Sine { index: 2 }, variance: SurrogateFn::Constant { value: 1.0 } },
    )
    .unwrap();
    let cfg = parse_config(
        r#"
horizon = 10
reps = 1
methods = ["ipw"]
scenario = { beta1 = [0.0, 0.0], beta2 = [1.0, 1.0] }
policy = { kind = "uniform" }
"#,
    )
    .unwrap();
    let scn = cfg.base_scenario().unwrap();
    for ctx in pool.contexts() {
        assert_eq!(scn.outcome_mean(&ctx, 0, &pool).unwrap(), scn.outcome_mean(&ctx, 1, &pool).unwrap());
    }
}

#[test]
fn selfcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    for check in selfcheck(dir.path()).unwrap() {
        assert!(check.passed, "{}: {}", check.name, check.detail);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let base = |extra: &str| {
        parse_config(&format!(
            "horizon = 100\nreps = 2\nmethods = [\"ipw\"]\nscenario = {{ preset = 1 }}\npolicy = {{ kind = \"uniform\" }}\n{extra}"
        ))
    };
    assert!(base("").is_ok());
    assert!(base("checkpoints = [200]").is_err());
    assert!(parse_config("horizon = 100\nreps = 0\nmethods = [\"ipw\"]\nscenario = { preset = 1 }\npolicy = { kind = \"uniform\" }").is_err());
    assert!(parse_config("horizon = 100\nreps = 1\nmethods = []\nscenario = { preset = 1 }\npolicy = { kind = \"uniform\" }").is_err());
}

/// Standardized estimation error under uniform logging.
#[test]
fn standardized_statistic_is_approximately_standard_normal() {
    let cfg = parse_config(
        r#"
horizon = 5000
reps = 500
methods = ["maipwm_external"]
scenario = { preset = 1, arms = 4 }
policy = { kind = "uniform" }
"#,
    )
    .unwrap();
    let exp = Experiment::prepare(cfg).unwrap();
    let d = exp.wm.dim();
    let draws: Vec<DVector<f64>> = (0..500u64)
        .map(|rep| {
            let traj = simulate(&exp.world, exp.config.seed, rep, 5000, None).unwrap();
            let external = external_contexts(&exp.world.pool, exp.config.seed, rep, 5000);
            let input = PipelineInput::new(&exp.wm, &exp.pi_e, &traj.history, &traj.blocks, 0.2);
            let res = run_pipeline(MethodKind::MaipwmExternal, &input, VariancePool::External { contexts: &external, ratio: 1.0 }, &[5000])
                .remove(0)
                .unwrap();
            &res.region.shape * (&res.theta_hat - &exp.theta_star)
        })
        .collect();
    let n = draws.len() as f64;
    for j in 0..d {
        let mean = draws.iter().map(|v| v[j]).sum::<f64>() / n;
        let var = draws.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 0.15, "coordinate {j}: mean {mean}");
        assert!((0.8..=1.25).contains(&var), "coordinate {j}: variance {var}");
    }
}

#[test]
fn guide_config_example_parses() {
    let chapter = include_str!("../../../book/src/experiments.md");
    let start = chapter.find("```toml\n").unwrap() + "```toml\n".len();
    let end = start + chapter[start..].find("```").unwrap();
    let cfg = parse_config(&chapter[start..end]).unwrap();
    assert_eq!(cfg.methods.len(), 5);
    assert_eq!(cfg.checkpoints, vec![500, 1000, 2000]);
}

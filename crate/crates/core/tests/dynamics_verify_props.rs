use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use jumpctl::dynamics::{bellman_series, mean_se, simulate, LinearFeedback, PolicyField, SimConfig, TablePolicy};
use jumpctl::generator::ScalarField;
use jumpctl::hjb::{dpp_residual, solve_stationary, Grid, SolveOptions};
use jumpctl::lq::{self, LqSpec};
use jumpctl::measures::{Atom, JumpMeasure};
use jumpctl::problem::{ActionSet, ConstantDiscount, CostSpec, DriftLattice, HjbProblem, StateCost};
use jumpctl::verify::{moment_ratios, submartingale_test, MartingaleMode};
use jumpctl::Action;

fn jumpy(sigma: f64, mu: f64) -> Action {
    let nu = JumpMeasure::atomic(1, vec![Atom::new(vec![-1.2], 0.5), Atom::new(vec![0.4], 1.5)]).unwrap();
    Action::new(DMatrix::from_element(1, 1, sigma), nu, DVector::from_element(1, mu)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn identical_configs_give_identical_bundles(seed in any::<u64>(), x0 in -2.0f64..2.0) {
        let cfg = SimConfig::new(vec![x0], 0.5, 0.01, 64, seed).with_characteristics();
        let pol = PolicyField::constant(jumpy(0.7, 0.1));
        let a = simulate(&pol, &cfg).unwrap();
        let b = simulate(&pol, &cfg).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn compensated_jumps_have_mean_zero() {
    let cfg = SimConfig::new(vec![0.3], 2.0, 0.01, 20_000, 4);
    let b = simulate(&PolicyField::constant(jumpy(0.0, 0.0)), &cfg).unwrap();
    let last = b.times.len() - 1;
    let (m, se, _) = mean_se((0..b.n_paths()).map(|i| b.state(i, last)[0] - 0.3));
    assert!(m.abs() <= 3.0 * se, "{m} ± {se}");
}

#[test]
fn truncated_drift_matches_its_prediction_in_mean() {
    let cfg = SimConfig::new(vec![0.0], 1.0, 0.01, 20_000, 8)
        .with_characteristics()
        .with_record_every(25);
    let b = simulate(&PolicyField::constant(jumpy(0.5, 0.3)), &cfg).unwrap();
    for k in 1..b.times.len() {
        let (m, se, _) = mean_se(b.paths.iter().map(|p| {
            let ch = p.characteristics.as_ref().unwrap();
            ch.b_h_observed[k] - ch.b_h_predicted[k]
        }));
        assert!(m.abs() <= 3.0 * se + 1e-12, "t={}: {m} ± {se}", b.times[k]);
    }
}

#[test]
fn continuous_moment_ratio_stays_bounded() {
    let pol = PolicyField::constant(jumpy(0.8, 0.2));
    let ratio = |t: f64| {
        let mut cfg = SimConfig::new(vec![0.0], t, 0.01, 5000, 3)
            .with_characteristics()
            .with_record_every(1_000_000);
        cfg.moment_orders = vec![2.0];
        moment_ratios(&simulate(&pol, &cfg).unwrap()).unwrap()[0].continuous
    };
    let (r1, r4) = (ratio(1.0), ratio(4.0));
    // Doob: E[sup |X^c|²] ≤ 4 E[∫‖σ‖²]
    assert!(r1 <= 4.0 && r4 <= 4.0);
    assert!((0.5..=2.0).contains(&(r4 / r1)), "{r1} {r4}");
}

fn lq_grid_problem() -> HjbProblem {
    let cost = CostSpec {
        state: StateCost::Quadratic { matrix: vec![vec![1.0]] },
        drift_weight: Some(vec![vec![1.0]]),
        jump_rate_weight: 0.0,
    };
    let lattice = DriftLattice {
        lo: vec![-2.0],
        hi: vec![2.0],
        points: vec![81],
        refine: true,
    };
    HjbProblem::new(
        ActionSet::with_drift_lattice(vec![Action::scalar(0.3, 0.0)], lattice),
        Arc::new(cost.build(1).unwrap()),
        Arc::new(ConstantDiscount(3.0)),
        vec![0.0],
    )
    .unwrap()
}

#[test]
fn bellman_test_agrees_with_dpp_residual_on_solved_value() {
    let prob = lq_grid_problem();
    let grid = Grid::uniform_1d(-6.0, 6.0, 401).unwrap();
    let sol = solve_stationary(&prob, &grid, &SolveOptions::default()).unwrap();
    let policy = PolicyField::new(TablePolicy::new(sol.policy.clone(), prob.actions.clone()).unwrap());
    let phi: Arc<dyn ScalarField> = Arc::new(sol.value.clone());

    let cfg = SimConfig::new(vec![1.5], 0.5, 1e-3, 5000, 21)
        .with_record_every(250)
        .with_cost(prob.cost.clone(), prob.discount.clone());
    let series = bellman_series(phi.as_ref(), &simulate(&policy, &cfg).unwrap()).unwrap();
    let sub = submartingale_test(&series, &[(0, 2)], 1, MartingaleMode::Submartingale).unwrap();
    let mart = submartingale_test(&series, &[(0, 2)], 1, MartingaleMode::Martingale).unwrap();

    let dpp = dpp_residual(phi, &prob, 0.5, &[policy], &[vec![1.5]], 5000, 21, 1e-3).unwrap();
    let z = dpp.residual / dpp.std_error;
    assert_eq!(sub.passed, z >= -3.0, "submartingale {sub:?} vs dpp z={z}");
    assert_eq!(mart.passed, z.abs() <= 3.0, "martingale {mart:?} vs dpp z={z}");
    // the Bellman increment from x0 is exactly the DPP residual
    let s = &mart.statistics[0];
    assert!((s.value - dpp.residual).abs() <= 1e-12 * (1.0 + dpp.residual.abs()));
}

#[test]
fn strong_passes_survive_doubling_the_sample() {
    let sol = lq::solve(&LqSpec::scalar(1.0, 1.0, 3.0, 0.0, 0.3)).unwrap();
    let cost = CostSpec {
        state: StateCost::Quadratic { matrix: vec![vec![1.0]] },
        drift_weight: Some(vec![vec![1.0]]),
        jump_rate_weight: 0.0,
    };
    let pol = PolicyField::new(LinearFeedback::from_lq(&sol, 1.4));
    let run = |n: usize| {
        let cfg = SimConfig::new(vec![3.0], 0.5, 2e-3, n, 5)
            .with_record_every(125)
            .with_cost(Arc::new(cost.build(1).unwrap()), Arc::new(ConstantDiscount(3.0)));
        let series = bellman_series(&sol.value_field(), &simulate(&pol, &cfg).unwrap()).unwrap();
        submartingale_test(&series, &[(0, 2)], 2, MartingaleMode::Submartingale).unwrap()
    };
    let small = run(2000);
    let large = run(4000);
    for (a, b) in small.statistics.iter().zip(&large.statistics) {
        if a.passed && a.value / a.std_error + 3.0 > 6.0 {
            assert!(b.passed, "{a:?} -> {b:?}");
        }
    }
    assert!(small.statistics.iter().any(|s| s.value / s.std_error + 3.0 > 6.0));
}

#[test]
fn reports_are_reproducible() {
    let sol = lq::solve(&LqSpec::scalar(1.0, 1.0, 3.0, 0.0, 0.3)).unwrap();
    let pol = PolicyField::new(LinearFeedback::from_lq(&sol, 1.0));
    let cost = CostSpec::state_only(StateCost::Quadratic { matrix: vec![vec![1.0]] });
    let cfg = SimConfig::new(vec![1.0], 0.4, 1e-2, 1500, 99)
        .with_record_every(10)
        .with_cost(Arc::new(cost.build(1).unwrap()), Arc::new(ConstantDiscount(3.0)));
    let report = || {
        let series = bellman_series(&sol.value_field(), &simulate(&pol, &cfg).unwrap()).unwrap();
        submartingale_test(&series, &[(0, 2), (2, 4)], 3, MartingaleMode::Martingale).unwrap()
    };
    assert_eq!(report(), report());
}

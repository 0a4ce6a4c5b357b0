use heatchain::dynamics::IntegratorConfig;
use heatchain::estimators::{
    cgf_cloning, cgf_curve, concavity_violation, cross_bond_discrepancy, ergodic_average, legendre_transform,
    mgf_naive, symmetry_residual, AverageConfig, CloningConfig,
};
use heatchain::model::Observable;
use heatchain::oracle::{mean_entropy_production, riccati_cgf};
use heatchain::streams::SeedTree;
use heatchain::{ChainModel, ChainParams};
use proptest::prelude::*;

fn harmonic(n: usize, t1: f64, tn: f64) -> ChainModel {
    ChainModel::new(ChainParams::harmonic(n, t1, tn)).unwrap()
}

fn cloning(population: usize, horizon: f64) -> CloningConfig {
    CloningConfig {
        horizon,
        population,
        window: 1.0,
        warmup_windows: 20,
        replicas: 6,
        integrator: IntegratorConfig::new(0.05),
    }
}

#[test]
fn cloning_matches_riccati_on_harmonic_pair() {
    let m = harmonic(2, 2.0, 1.0);
    let exact = riccati_cgf(&m, 0.5).unwrap().value;
    let p = cgf_cloning(
        &m,
        Observable::Bond(1),
        0.5,
        &cloning(1000, 200.0),
        &m.zero_state(),
        &SeedTree::new(31),
    )
    .unwrap();
    assert!(p.stderr > 0.0);
    assert!(
        (p.estimate - exact).abs() < 3.0 * p.stderr,
        "{} ± {} vs {exact}",
        p.estimate,
        p.stderr
    );
}

#[test]
fn naive_and_cloning_agree_at_short_horizon() {
    let m = harmonic(1, 2.0, 1.0);
    let (alpha, t) = (0.5, 4.0);
    let h = IntegratorConfig::new(0.05);
    let naive = mgf_naive(
        &m,
        Observable::Bond(0),
        alpha,
        t,
        20_000,
        &m.zero_state(),
        &h,
        &SeedTree::new(32),
    )
    .unwrap();
    let cfg = CloningConfig {
        warmup_windows: 0,
        replicas: 8,
        ..cloning(2000, t)
    };
    let clone = cgf_cloning(
        &m,
        Observable::Bond(0),
        alpha,
        &cfg,
        &m.zero_state(),
        &SeedTree::new(33),
    )
    .unwrap();
    let from_naive = -naive.value.ln() / t;
    let naive_se = (naive.ci.1.ln() - naive.ci.0.ln()) / (2.0 * 1.96 * t);
    let joint = (naive_se.powi(2) + clone.stderr.powi(2)).sqrt();
    assert!(
        (from_naive - clone.estimate).abs() < 3.0 * joint,
        "{from_naive} vs {} (joint {joint})",
        clone.estimate
    );
}

#[test]
fn curves_agree_across_bonds_and_are_symmetric() {
    let m = harmonic(3, 2.0, 1.0);
    let grid = [0.3, 0.5, 0.7];
    let cfg = cloning(500, 100.0);
    let a = cgf_curve(
        &m,
        Observable::Bond(1),
        &grid,
        &cfg,
        &m.zero_state(),
        &SeedTree::new(34),
    )
    .unwrap();
    let b = cgf_curve(
        &m,
        Observable::Bond(2),
        &grid,
        &cfg,
        &m.zero_state(),
        &SeedTree::new(35),
    )
    .unwrap();
    let cross = cross_bond_discrepancy(&a, &b).unwrap();
    assert!(cross.max_z < 3.0, "{cross:?}");
    for curve in [&a, &b] {
        let sym = symmetry_residual(curve).unwrap();
        assert!(sym.max_z < 3.0, "{sym:?}");
    }
}

#[test]
fn equal_temperatures_give_zero_curve() {
    let m = harmonic(2, 1.3, 1.3);
    let grid = [-0.5, 0.25, 0.5, 0.75, 1.5];
    let curve = cgf_curve(
        &m,
        Observable::Bond(1),
        &grid,
        &cloning(50, 10.0),
        &m.zero_state(),
        &SeedTree::new(36),
    )
    .unwrap();
    assert!(curve.points.iter().all(|p| p.estimate == 0.0));
}

#[test]
fn mean_entropy_production_is_positive() {
    let m = harmonic(2, 2.0, 1.0);
    let cfg = AverageConfig {
        horizon: 2000.0,
        burn_in: 20.0,
        batches: 20,
        replicas: 4,
        integrator: IntegratorConfig::new(0.05),
    };
    let sigma = |x: &heatchain::State| m.entropy_production(x, 1).unwrap();
    let est = ergodic_average(&m, &sigma, &m.zero_state(), &cfg, &SeedTree::new(37)).unwrap();
    assert!(est.mean > 3.0 * est.stderr);
    assert!(mean_entropy_production(&m, Observable::Bond(1)).unwrap() > 0.0);
}

#[test]
fn riccati_curve_is_concave_and_transform_is_symmetric() {
    let m = harmonic(2, 2.0, 1.0);
    let alphas: Vec<f64> = (0..=80).map(|k| -0.5 + 0.025 * k as f64).collect();
    let values: Vec<f64> = alphas.iter().map(|&a| riccati_cgf(&m, a).unwrap().value).collect();
    assert!(concavity_violation(&alphas, &values) <= 1e-8);
    let mean = mean_entropy_production(&m, Observable::Bond(1)).unwrap();
    let w: Vec<f64> = (-8..=8).map(|k| k as f64 * mean / 8.0).collect();
    let table = legendre_transform(&alphas, &values, &w, "riccati").unwrap();
    assert!(table.symmetry_residual() < 1e-6, "{}", table.symmetry_residual());
    assert!(table.rows.iter().all(|r| r.rate >= 0.0));
    assert!(table.rate_at(mean).unwrap() < 1e-6);
    assert!(table.convexity_violation() <= 1e-8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn naive_generating_function_is_one_at_zero(seed in any::<u64>(), samples in 2usize..50, steps in 1u64..40) {
        let m = harmonic(2, 2.0, 1.0);
        let h = IntegratorConfig::new(0.05);
        let est = mgf_naive(&m, Observable::Bond(1), 0.0, steps as f64 * 0.05, samples, &m.zero_state(), &h, &SeedTree::new(seed)).unwrap();
        prop_assert_eq!(est.value, 1.0);
        prop_assert_eq!(est.ci, (1.0, 1.0));
    }

    #[test]
    fn cloning_is_reproducible(seed in any::<u64>()) {
        let m = harmonic(1, 2.0, 1.0);
        let cfg = CloningConfig { warmup_windows: 1, replicas: 2, ..cloning(20, 3.0) };
        let run = || cgf_cloning(&m, Observable::Bond(0), 0.4, &cfg, &m.zero_state(), &SeedTree::new(seed)).unwrap();
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn symmetric_curves_have_symmetric_rates(scale in 0.01f64..1.0, quartic in 0.0f64..0.5) {
        // e(alpha) = c a(1-a) + k (a(1-a))^2 is symmetric about 1/2 and concave near it.
        let alphas: Vec<f64> = (0..=40).map(|k| -0.5 + 0.05 * k as f64).collect();
        let values: Vec<f64> = alphas.iter().map(|&a| { let s = a * (1.0 - a); scale * s - quartic * scale * s * s }).collect();
        let w: Vec<f64> = (-5..=5).map(|k| k as f64 * scale / 5.0).collect();
        let table = legendre_transform(&alphas, &values, &w, "test").unwrap();
        prop_assert!(table.symmetry_residual() < 1e-9);
        prop_assert!(table.rows.iter().all(|r| r.rate >= 0.0));
        prop_assert!(table.convexity_violation() <= 1e-9);
    }
}

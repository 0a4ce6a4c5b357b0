use heatchain::dynamics::{closed_integrate, deterministic_integrate, integrate, IntegratorConfig, Stepper};
use heatchain::estimators::{ergodic_averages, AverageConfig};
use heatchain::model::Observable;
use heatchain::oracle::mean_entropy_production;
use heatchain::streams::SeedTree;
use heatchain::{ChainModel, ChainParams, State};
use proptest::prelude::*;

fn harmonic(n: usize, t1: f64, tn: f64) -> ChainModel {
    ChainModel::new(ChainParams::harmonic(n, t1, tn)).unwrap()
}

fn quartic(n: usize, t1: f64, tn: f64) -> ChainModel {
    ChainModel::new(ChainParams::quartic(n, t1, tn)).unwrap()
}

fn start(model: &ChainModel, scale: f64) -> State {
    let mut x = model.zero_state();
    for (k, v) in x.p.iter_mut().chain(x.q.iter_mut()).chain(x.r.iter_mut()).enumerate() {
        *v = scale * ((k as f64 * 1.7).sin() + 0.3);
    }
    x
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn trajectories_are_bit_identical(seed in any::<u64>(), n in 1usize..4, steps in 1u64..200) {
        let m = quartic(n, 2.0, 1.0);
        let cfg = IntegratorConfig::new(0.01);
        let x0 = start(&m, 0.5);
        let obs: Vec<Observable> = (0..=n).map(Observable::Bond).collect();
        let t = steps as f64 * 0.01;
        let run = || integrate(&m, &x0, t, &cfg, &mut SeedTree::new(seed).rng("path", &[]), &obs, Some(7)).unwrap();
        let (a, b) = (run(), run());
        prop_assert_eq!(a.state, b.state);
        prop_assert_eq!(a.work.integrals, b.work.integrals);
        prop_assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn work_is_additive_over_segments(seed in any::<u64>(), first in 1u64..100, second in 1u64..100) {
        let m = quartic(2, 2.0, 1.0);
        let cfg = IntegratorConfig::new(0.02);
        let x0 = start(&m, 0.5);
        let obs = [Observable::Bond(0), Observable::Bond(1), Observable::Boundary];
        let (t1, t2) = (first as f64 * 0.02, second as f64 * 0.02);
        let whole = integrate(&m, &x0, t1 + t2, &cfg, &mut SeedTree::new(seed).rng("path", &[]), &obs, None).unwrap();
        let mut rng = SeedTree::new(seed).rng("path", &[]);
        let a = integrate(&m, &x0, t1, &cfg, &mut rng, &obs, None).unwrap();
        let b = integrate(&m, &a.state, t2, &cfg, &mut rng, &obs, None).unwrap();
        let mut joined = a.work.clone();
        joined.extend(&b.work);
        prop_assert_eq!(&whole.state, &b.state);
        prop_assert!((joined.elapsed - whole.work.elapsed).abs() < 1e-12);
        for (u, v) in joined.integrals.iter().zip(&whole.work.integrals) {
            prop_assert!((u - v).abs() <= 1e-10 * (1.0 + v.abs()));
        }
    }
}

#[test]
fn reservoir_update_matches_ornstein_uhlenbeck() {
    let params = ChainParams {
        lambda: 1e-12,
        gamma: 0.8,
        ..ChainParams::harmonic(2, 2.0, 0.5)
    };
    let m = ChainModel::new(params).unwrap();
    let h = 0.1;
    let mut stepper = Stepper::new(&m, IntegratorConfig::new(h)).unwrap();
    let mut rng = SeedTree::new(3).rng("ou", &[]);
    let r0 = [1.0, -0.5];
    let samples = 100_000;
    let (mut sum, mut sq) = ([0.0; 2], [0.0; 2]);
    for _ in 0..samples {
        let mut x = m.zero_state();
        x.r.copy_from_slice(&r0);
        stepper.step(&mut x, &mut rng).unwrap();
        for j in 0..2 {
            sum[j] += x.r[j];
            sq[j] += x.r[j] * x.r[j];
        }
    }
    let decay = (-m.gamma() * h).exp();
    for j in 0..2 {
        let var_exact = m.r_temperature(j) * (1.0 - decay * decay);
        let mean = sum[j] / samples as f64;
        let var = sq[j] / samples as f64 - mean * mean;
        let se_mean = (var_exact / samples as f64).sqrt();
        let se_var = var_exact * (2.0 / samples as f64).sqrt();
        assert!((mean - decay * r0[j]).abs() < 4.0 * se_mean, "mean {mean}");
        assert!((var - var_exact).abs() < 4.0 * se_var, "var {var} vs {var_exact}");
    }
}

#[test]
fn closed_system_conserves_energy_at_second_order() {
    for m in [harmonic(1, 1.0, 1.0), quartic(3, 1.0, 1.0)] {
        let x0 = start(&m, 1.0);
        let drift = |h: f64| {
            let path = closed_integrate(&m, &x0, 10.0, h, 1).unwrap();
            let g0 = path.energies[0];
            path.energies.iter().map(|g| (g - g0).abs()).fold(0.0, f64::max)
        };
        let (coarse, fine) = (drift(0.02), drift(0.01));
        assert!(coarse < 1e-2, "drift {coarse}");
        let ratio = coarse / fine;
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }
}

#[test]
fn noiseless_energy_decays() {
    let m = quartic(3, 1.0, 1.0);
    let x0 = start(&m, 2.0);
    let path = deterministic_integrate(&m, &x0, 20.0, 0.005, 20).unwrap();
    let g0 = path.energies[0];
    for w in path.energies.windows(2) {
        assert!(w[1] <= w[0] + 1e-4 * g0, "{} -> {}", w[0], w[1]);
    }
    assert!(*path.energies.last().unwrap() < 0.9 * g0);
    assert!(path.r2_integral > 0.0);
}

/// The splitting is linear for harmonic chains, so the mean follows the
/// noiseless scheme exactly; its energy converges at second order.
#[test]
fn mean_dynamics_converge_at_second_order() {
    let m = harmonic(2, 2.0, 1.0);
    let x0 = start(&m, 1.5);
    let t = 2.0;
    let energy = |h: f64| {
        let path = deterministic_integrate(&m, &x0, t, h, 1).unwrap();
        m.energy_g(&path.state)
    };
    let (a, b, c) = (energy(0.2), energy(0.1), energy(0.05));
    let ratio = (a - b) / (b - c);
    assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
}

#[test]
fn equilibrium_moments_are_gibbs() {
    let temp = 1.5;
    let m = harmonic(2, temp, temp);
    let cfg = AverageConfig {
        horizon: 2000.0,
        burn_in: 20.0,
        batches: 20,
        replicas: 4,
        integrator: IntegratorConfig::new(0.05),
    };
    // Stiffness [[2, -1], [-1, 2]] has inverse [[2, 1], [1, 2]] / 3.
    let observables: Vec<(Box<dyn Fn(&State) -> f64 + Sync>, f64)> = vec![
        (Box::new(|x: &State| x.p[0] * x.p[0]), temp),
        (Box::new(|x: &State| x.p[1] * x.p[1]), temp),
        (Box::new(|x: &State| x.q[0] * x.q[0]), temp * 2.0 / 3.0),
        (Box::new(|x: &State| x.q[0] * x.q[1]), temp / 3.0),
        (Box::new(|x: &State| x.r[0] * x.r[0]), temp),
        (Box::new(|x: &State| x.r[1] * x.r[1]), temp),
        (Box::new(|x: &State| x.p[0] * x.q[0]), 0.0),
    ];
    let fns: Vec<&(dyn Fn(&State) -> f64 + Sync)> = observables.iter().map(|(f, _)| f.as_ref()).collect();
    let est = ergodic_averages(&m, &fns, &m.zero_state(), &cfg, &SeedTree::new(21)).unwrap();
    for (e, (_, exact)) in est.iter().zip(&observables) {
        assert!(
            (e.mean - exact).abs() < 4.0 * e.stderr,
            "{} vs {exact} (se {})",
            e.mean,
            e.stderr
        );
    }
}

#[test]
fn long_run_entropy_production_matches_lyapunov_mean() {
    let m = harmonic(2, 2.0, 1.0);
    let exact = mean_entropy_production(&m, Observable::Bond(1)).unwrap();
    let cfg = AverageConfig {
        horizon: 4000.0,
        burn_in: 20.0,
        batches: 20,
        replicas: 4,
        integrator: IntegratorConfig::new(0.05),
    };
    let sigma = |x: &State| m.entropy_production(x, 1).unwrap();
    let est = ergodic_averages(&m, &[&sigma], &m.zero_state(), &cfg, &SeedTree::new(22)).unwrap();
    assert!(
        (est[0].mean - exact).abs() < 3.0 * est[0].stderr,
        "{} vs {exact} (se {})",
        est[0].mean,
        est[0].stderr
    );
}

#[test]
fn interior_energy_balance_holds_along_paths() {
    let m = quartic(4, 2.0, 1.0);
    let h = 1e-3;
    let mut stepper = Stepper::new(&m, IntegratorConfig::new(h)).unwrap();
    let mut rng = SeedTree::new(23).rng("balance", &[]);
    let mut x = start(&m, 0.8);
    let k = 2;
    let h0 = m.local_energies(&x)[k];
    let mut inflow = 0.0;
    for _ in 0..2000 {
        stepper
            .step_with(&mut x, &mut rng, |s, w| {
                inflow += w * (m.heat_flow(s, k).unwrap() - m.heat_flow(s, k + 1).unwrap());
            })
            .unwrap();
    }
    let change = m.local_energies(&x)[k] - h0;
    assert!(
        (change - inflow).abs() < 1e-4 * (1.0 + change.abs()),
        "{change} vs {inflow}"
    );
}

use heatchain::model::Observable;
use heatchain::{ChainModel, ChainParams, PotentialSpec, State};
use proptest::prelude::*;

fn chain(n: usize, d: usize, quartic: bool, t1: f64, tn: f64) -> ChainModel {
    let base = if quartic {
        ChainParams::quartic(n, t1, tn)
    } else {
        ChainParams::harmonic(n, t1, tn)
    };
    ChainModel::new(ChainParams { d, ..base }).unwrap()
}

fn state_from(model: &ChainModel, coords: &[f64]) -> State {
    let layout = model.layout();
    State::from_flat(layout, &coords[..layout.dim()])
}

fn arb_case() -> impl Strategy<Value = (ChainModel, State)> {
    (
        1usize..5,
        1usize..3,
        any::<bool>(),
        0.3f64..4.0,
        0.3f64..4.0,
        prop::collection::vec(-3.0f64..3.0, 24),
    )
        .prop_map(|(n, d, quartic, t1, tn, coords)| {
            let m = chain(n, d, quartic, t1, tn);
            let x = state_from(&m, &coords);
            (m, x)
        })
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #[test]
    fn local_energies_sum_to_hamiltonian((m, x) in arb_case()) {
        let total: f64 = m.local_energies(&x).iter().sum();
        prop_assert!(close(total, m.hamiltonian(&x), 1e-12));
    }

    #[test]
    fn entropy_production_is_odd_under_reversal((m, x) in arb_case()) {
        let jx = x.reversed();
        for i in 0..=m.n() {
            let a = m.entropy_production(&x, i).unwrap();
            let b = m.entropy_production(&jx, i).unwrap();
            prop_assert!(close(a, -b, 1e-12));
        }
        let a = m.observe(Observable::Boundary, &x);
        let b = m.observe(Observable::Boundary, &jx);
        prop_assert!(close(a, -b, 1e-12));
    }

    #[test]
    fn reference_and_energy_are_even_under_reversal((m, x) in arb_case()) {
        let jx = x.reversed();
        prop_assert_eq!(m.energy_g(&x), m.energy_g(&jx));
        for i in 0..=m.n() {
            prop_assert_eq!(m.reference_r(&x, i).unwrap(), m.reference_r(&jx, i).unwrap());
        }
    }

    #[test]
    fn reference_telescopes((m, x) in arb_case()) {
        let h = m.hamiltonian(&x);
        let diff = m.reference_r(&x, m.n()).unwrap() - m.reference_r(&x, 0).unwrap();
        prop_assert!(close(diff, (1.0 / m.t1() - 1.0 / m.tn()) * h, 1e-12));
    }

    #[test]
    fn equal_temperatures_make_reference_proportional_to_energy(
        n in 1usize..5, t in 0.3f64..4.0, coords in prop::collection::vec(-3.0f64..3.0, 24),
    ) {
        let m = chain(n, 1, true, t, t);
        let x = state_from(&m, &coords);
        for i in 0..=n {
            prop_assert!(close(m.reference_r(&x, i).unwrap(), m.energy_g(&x) / t, 1e-12));
            prop_assert_eq!(m.entropy_production(&x, i).unwrap(), 0.0);
        }
    }

    #[test]
    fn harmonic_energies_match_assembled_matrix(
        n in 1usize..5, a2 in 0.2f64..3.0, b2 in 0.2f64..3.0, coords in prop::collection::vec(-3.0f64..3.0, 24),
    ) {
        let params = ChainParams {
            u1: PotentialSpec::harmonic(a2),
            u2: (n > 1).then(|| PotentialSpec::harmonic(b2)),
            ..ChainParams::harmonic(n, 2.0, 1.0)
        };
        let m = ChainModel::new(params).unwrap();
        let x = state_from(&m, &coords);
        // Stiffness matrix of the pinned chain.
        let mut k = vec![vec![0.0; n]; n];
        for i in 0..n {
            k[i][i] += a2;
            if i + 1 < n {
                k[i][i] += b2;
                k[i + 1][i + 1] += b2;
                k[i][i + 1] -= b2;
                k[i + 1][i] -= b2;
            }
        }
        let mut quad = 0.0;
        for i in 0..n {
            for j in 0..n {
                quad += x.q[i] * k[i][j] * x.q[j];
            }
        }
        let kinetic: f64 = x.p.iter().map(|v| v * v).sum();
        let r2: f64 = x.r.iter().map(|v| v * v).sum();
        let g = 0.5 * (kinetic + quad + r2);
        prop_assert!(close(m.energy_g(&x), g, 1e-12));
    }

    #[test]
    fn harmonic_flows_are_quadratic_forms(
        (m, x) in arb_case(), coords in prop::collection::vec(-3.0f64..3.0, 24), c in -2.0f64..2.0,
    ) {
        prop_assume!(m.is_harmonic());
        let y = state_from(&m, &coords);
        let add = |a: &State, b: &State, s: f64| {
            let layout = m.layout();
            let v: Vec<f64> = a.to_flat().iter().zip(b.to_flat()).map(|(u, w)| u + s * w).collect();
            State::from_flat(layout, &v)
        };
        let scaled = add(&m.zero_state(), &x, c);
        for i in 0..=m.n() {
            let f = |s: &State| m.heat_flow(s, i).unwrap();
            let parallelogram = f(&add(&x, &y, 1.0)) + f(&add(&x, &y, -1.0)) - 2.0 * f(&x) - 2.0 * f(&y);
            prop_assert!(parallelogram.abs() <= 1e-10 * (1.0 + f(&x).abs() + f(&y).abs()));
            prop_assert!(close(f(&scaled), c * c * f(&x), 1e-12));
        }
    }
}

#[test]
fn boundary_flows_have_stated_values() {
    let m = chain(1, 1, false, 1.0, 2.0);
    let x = State::new(vec![1.0], vec![0.0], vec![1.0, 1.0]);
    assert!((m.reference_r(&x, 0).unwrap() - 1.0).abs() < 1e-15);
    let m = chain(2, 1, false, 2.0, 1.0);
    let x = State::new(vec![1.0, 2.0], vec![0.5, -0.5], vec![0.3, -0.2]);
    let phi = m.heat_flow(&x, 1).unwrap();
    assert!((m.entropy_production(&x, 1).unwrap() - (1.0 - 0.5) * phi).abs() < 1e-15);
    assert!(m.heat_flow(&x, 3).is_err());
}

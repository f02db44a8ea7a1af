use approx::assert_relative_eq;
use proptest::prelude::*;
use pszeros::models::Normalization;
use pszeros::torus_exact::{partition_function_exact, partition_polynomial, transfer_matrix_pf};
use pszeros::{Configuration, SpinModel, C64};

/// Nearest-neighbour sum on an `L × L` torus written out by hand.
fn ising_oracle(l: usize, j: f64, s: &[i32], z: C64) -> C64 {
    let at = |x: usize, y: usize| s[(x % l) * l + (y % l)];
    let mut bonds = 0.0;
    let mut up = 0.0;
    for x in 0..l {
        for y in 0..l {
            bonds += (at(x, y) * (at(x + 1, y) + at(x, y + 1))) as f64;
            up += ((at(x, y) + 1) / 2) as f64;
        }
    }
    (j * bonds).exp() * z.powf(up)
}

fn blume_capel_oracle(l: usize, j: f64, lambda: f64, s: &[i32], z: C64) -> C64 {
    let at = |x: usize, y: usize| s[(x % l) * l + (y % l)];
    let mut energy = 0.0;
    let mut power = 0.0;
    for x in 0..l {
        for y in 0..l {
            let v = at(x, y);
            energy += j * ((v - at(x + 1, y)).pow(2) + (v - at(x, y + 1)).pow(2)) as f64;
            energy -= lambda * (v * v) as f64;
            power += (v + 1) as f64;
        }
    }
    (-energy).exp() * z.powf(power)
}

fn brute_force<F: Fn(&[i32]) -> C64>(l: usize, labels: &[i32], w: F) -> C64 {
    let n = l * l;
    let mut total = C64::new(0.0, 0.0);
    let mut s = vec![0i32; n];
    for code in 0..labels.len().pow(n as u32) {
        let mut c = code;
        for v in s.iter_mut() {
            *v = labels[c % labels.len()];
            c /= labels.len();
        }
        total += w(&s);
    }
    total
}

fn spins_of(model: &SpinModel, s: &[i32]) -> Vec<u8> {
    s.iter().map(|&v| model.spin(v).unwrap()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ising_energy_matches_bond_sum(
        s in prop::collection::vec(prop::sample::select(vec![-1, 1]), 16),
        j in 0.1f64..2.0,
        r in 0.3f64..2.0,
        t in 0.0f64..6.28,
    ) {
        let z = C64::from_polar(r, t);
        let m = SpinModel::ising(2, j, Normalization::Shifted).unwrap();
        let cfg = Configuration::torus(2, 4, spins_of(&m, &s));
        let got = m.hamiltonian(&cfg).boltzmann(z);
        let want = ising_oracle(4, j, &s, z);
        prop_assert!((got - want).norm() <= 1e-10 * want.norm());
    }

    #[test]
    fn blume_capel_energy_matches_site_and_bond_sum(
        s in prop::collection::vec(prop::sample::select(vec![-1, 0, 1]), 16),
        j in 0.1f64..2.0,
        lambda in -1.0f64..1.0,
        r in 0.3f64..2.0,
        t in 0.0f64..6.28,
    ) {
        let z = C64::from_polar(r, t);
        let m = SpinModel::blume_capel(2, j, lambda, Normalization::Shifted).unwrap();
        let cfg = Configuration::torus(2, 4, spins_of(&m, &s));
        let got = m.hamiltonian(&cfg).boltzmann(z);
        let want = blume_capel_oracle(4, j, lambda, &s, z);
        prop_assert!((got - want).norm() <= 1e-10 * want.norm());
    }

    #[test]
    fn ising_excitation_is_zero_on_ground_states(m in 0u8..2, j in 0.1f64..2.0) {
        let model = SpinModel::ising(2, j, Normalization::Shifted).unwrap();
        let cfg = Configuration::constant_torus(2, 5, m);
        let e = model.excitation(&cfg).unwrap();
        prop_assert!(e.a.norm() < 1e-12 && e.p == 0.0);
    }
}

#[test]
fn partition_function_matches_brute_force() {
    let z = C64::new(0.8, 0.45);
    let ising = SpinModel::ising(2, 0.7, Normalization::Shifted).unwrap();
    let want = brute_force(3, &[-1, 1], |s| ising_oracle(3, 0.7, s, z));
    let got = partition_function_exact(&ising, 3, z).unwrap();
    assert_relative_eq!((got - want).norm() / want.norm(), 0.0, epsilon = 1e-12);
    let bc = SpinModel::blume_capel(2, 0.9, 0.2, Normalization::Shifted).unwrap();
    let want = brute_force(3, &[-1, 0, 1], |s| blume_capel_oracle(3, 0.9, 0.2, s, z));
    let got = partition_function_exact(&bc, 3, z).unwrap();
    assert!((got - want).norm() < 1e-12 * want.norm());
}

#[test]
fn transfer_matrix_and_polynomial_agree_with_enumeration() {
    let z = C64::new(-0.3, 1.1);
    for model in [
        SpinModel::ising(2, 1.1, Normalization::Shifted).unwrap(),
        SpinModel::blume_capel(2, 0.8, -0.4, Normalization::Shifted).unwrap(),
    ] {
        for l in [3, 4] {
            let e = partition_function_exact(&model, l, z).unwrap();
            let t = transfer_matrix_pf(&model, l, z).unwrap();
            let p = partition_polynomial(&model, l).unwrap().eval(z);
            assert!((e - t).norm() < 1e-10 * e.norm(), "{} L={l}", model.name);
            assert!((e - p).norm() < 1e-10 * e.norm(), "{} L={l}", model.name);
        }
    }
}

#[test]
fn ising_polynomial_is_palindromic() {
    let p = partition_polynomial(&SpinModel::ising(2, 1.0, Normalization::Shifted).unwrap(), 4).unwrap();
    let c = &p.coefficients;
    assert_eq!(c.len(), 17);
    for k in 0..c.len() {
        assert!((c[k] - c[c.len() - 1 - k]).norm() <= 1e-12 * c[k].norm());
    }
}

#[test]
fn potts_is_rejected_at_high_temperature() {
    assert!(SpinModel::potts(2, 3, 1.0).is_err());
    assert!(SpinModel::potts(2, 3, 1.2).is_ok());
}

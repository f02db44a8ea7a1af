use pszeros::contours::Region;
use pszeros::metastable::{
    empty_interior_phi, CapPolicy, Cutoffs, FreeEnergyModel, Geometry, PressureSeries, TruncatedTable,
};
use pszeros::{Normalization, Regime, SpinModel, C64};

fn loose_regime() -> Regime {
    Regime {
        tau: 0.5,
        m: 1.0,
        alpha: 1.0,
        c0: 0.0,
    }
}

/// Low-temperature series of the square-lattice Ising pressure in `x = e^{-2J}`:
/// `x^4 + 2x^6 + 9/2 x^8 + …`. Three-site defect sets miss the 2×2 block, which
/// contributes `x^8`.
#[test]
fn ising_pressure_matches_low_temperature_series() {
    let j = 2.0;
    let m = SpinModel::ising(2, j, Normalization::Shifted).unwrap();
    let s = PressureSeries::build(&m, 1, Geometry::Plane { d: 2 }, 3).unwrap();
    let x: f64 = (-2.0 * j).exp();
    let expected = x.powi(4) + 2.0 * x.powi(6) + 3.5 * x.powi(8);
    let got = s.eval(C64::new(1.0, 0.0), 1.0);
    assert!(got.im.abs() < 1e-25);
    assert!(
        (got.re - expected).abs() < 100.0 * x.powi(10),
        "{} vs {}",
        got.re,
        expected
    );
}

#[test]
fn ising_pressure_is_symmetric_under_global_flip() {
    let m = SpinModel::ising(2, 1.5, Normalization::Shifted).unwrap();
    let plus = PressureSeries::build(&m, 1, Geometry::Plane { d: 2 }, 2).unwrap();
    let minus = PressureSeries::build(&m, 0, Geometry::Plane { d: 2 }, 2).unwrap();
    for z in [C64::new(1.3, 0.2), C64::new(0.8, -0.4)] {
        let a = plus.eval(z, 1.0);
        let b = minus.eval(C64::new(1.0, 0.0) / z, 1.0);
        assert!((a - b).norm() < 1e-14 * a.norm().max(1e-300));
    }
}

#[test]
fn large_torus_series_equals_plane_series() {
    let m = SpinModel::ising(2, 1.0, Normalization::Shifted).unwrap();
    let plane = PressureSeries::build(&m, 1, Geometry::Plane { d: 2 }, 2).unwrap();
    let torus = PressureSeries::build(&m, 1, Geometry::Torus { d: 2, l: 25 }, 2).unwrap();
    let z = C64::new(1.1, 0.3);
    let (a, b) = (plane.eval(z, 1.0), torus.eval(z, 1.0));
    assert!((a - b).norm() < 1e-13 * a.norm(), "{a} vs {b}");
}

#[test]
fn numeric_and_symbolic_evaluation_agree() {
    let m = SpinModel::blume_capel(2, 1.0, 0.2, Normalization::Shifted).unwrap();
    let s = PressureSeries::build(&m, 2, Geometry::Plane { d: 2 }, 2).unwrap();
    let z = C64::new(0.9, 0.1);
    let phi = 0.7;
    let act: Vec<C64> = (0..s.classes.len()).map(|i| s.class_activity(i, z, phi)).collect();
    let (a, b) = (s.eval(z, phi), s.eval_numeric(&act));
    assert!((a - b).norm() < 1e-14 * a.norm());
}

#[test]
fn truncated_partition_equals_exact_at_symmetric_point() {
    let m = SpinModel::ising(2, 0.9, Normalization::Shifted).unwrap();
    let z = C64::new(1.0, 0.0);
    let mut t = TruncatedTable::new(&m, z, loose_regime(), CapPolicy::Record);
    for side in [5usize, 7] {
        let r = Region::rect(&[side, side]);
        for q in [0u8, 1] {
            let exact = t.z_exact(&r, q).unwrap();
            let prime = t.z_prime(&r, q).unwrap();
            assert!(
                (exact - prime).norm() < 1e-11 * exact.norm(),
                "side {side} q {q}: {exact} vs {prime}"
            );
        }
    }
    assert!(t.cap_events().is_empty());
}

#[test]
fn contour_weights_reproduce_partition_function() {
    let m = SpinModel::blume_capel(2, 0.8, 0.3, Normalization::Shifted).unwrap();
    let z = C64::new(0.7, 0.4);
    let mut t = TruncatedTable::new(&m, z, loose_regime(), CapPolicy::Record);
    let r = Region::rect(&[6, 5]);
    for q in 0..3u8 {
        let exact = t.z_exact(&r, q).unwrap();
        let via_k = t.z_from_k(&r, q).unwrap();
        assert!(
            (exact - via_k).norm() < 1e-11 * exact.norm(),
            "q {q}: {exact} vs {via_k}"
        );
    }
}

#[test]
fn phi_is_one_at_ising_symmetric_point_and_zero_deep_in_other_phase() {
    let m = SpinModel::ising(2, 1.0, Normalization::Shifted).unwrap();
    assert_eq!(empty_interior_phi(&m, 1, C64::new(1.0, 0.0), 8.0), 1.0);
    assert_eq!(empty_interior_phi(&m, 1, C64::new(1e-3, 0.0), 8.0), 0.0);
}

#[test]
fn free_energies_pick_the_dominant_phase() {
    let m = SpinModel::ising(2, 1.0, Normalization::Shifted).unwrap();
    let fe = FreeEnergyModel::new(m, loose_regime(), CapPolicy::Record, Cutoffs { order: 2 }).unwrap();
    let p = fe.free_energies(C64::new(1.5, 0.0)).unwrap();
    assert_eq!(p.stable, vec![1]);
    let q = fe.free_energies(C64::new(1.0, 0.0)).unwrap();
    assert_eq!(q.stable.len(), 2);
    let small = fe.finite_volume_zeta(1, 5, C64::new(1.2, 0.0)).unwrap();
    assert!(small.exact);
    assert_eq!(small.zeta, fe.model.theta(1, C64::new(1.2, 0.0)));
}

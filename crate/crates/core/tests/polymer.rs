use proptest::prelude::*;
use pszeros::polymer::{
    clusters, kp_certificate, log_partition_expansion, polymer_partition_function, ursell_coefficient, Certificate,
    PolymerSystem,
};
use pszeros::torus_exact::polynomial_roots;
use pszeros::C64;

fn factorial(n: u32) -> f64 {
    (1..=n).map(f64::from).product()
}

/// The coefficient of `w1^a w2^b` in `log(1 + w1 + w2)` is `(-1)^{a+b+1} (a+b-1)! / (a! b!)`.
#[test]
fn ursell_matches_logarithm_taylor_coefficients() {
    let sys = PolymerSystem::new(vec![C64::new(0.1, 0.0); 2], &[(0, 1)]).unwrap();
    for a in 0..=4u32 {
        for b in 0..=4u32 {
            if a + b == 0 {
                continue;
            }
            let mut x = Vec::new();
            if a > 0 {
                x.push((0, a));
            }
            if b > 0 {
                x.push((1, b));
            }
            let u = ursell_coefficient(&sys, &x).unwrap();
            let sign = if (a + b) % 2 == 1 { 1.0 } else { -1.0 };
            assert_eq!(
                u.value(),
                sign * factorial(a + b - 1) / (factorial(a) * factorial(b)),
                "a={a} b={b}"
            );
        }
    }
}

#[test]
fn compatible_pairs_have_vanishing_ursell_function() {
    let sys = PolymerSystem::new(vec![C64::new(0.1, 0.0); 3], &[(0, 1)]).unwrap();
    assert!(ursell_coefficient(&sys, &[(0, 1), (2, 1)]).unwrap().is_zero());
    assert!(ursell_coefficient(&sys, &[(0, 2), (1, 1), (2, 1)]).unwrap().is_zero());
}

fn system_strategy() -> impl Strategy<Value = (Vec<(f64, f64)>, Vec<bool>)> {
    (1usize..=5).prop_flat_map(|n| {
        (
            prop::collection::vec((0.02f64..0.12, 0.0f64..6.28), n),
            prop::collection::vec(any::<bool>(), n * (n - 1) / 2),
        )
    })
}

fn build(w: &[(f64, f64)], mask: &[bool]) -> PolymerSystem {
    let n = w.len();
    let mut edges = Vec::new();
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            if mask[k] {
                edges.push((i, j));
            }
            k += 1;
        }
    }
    PolymerSystem::new(w.iter().map(|&(r, t)| C64::from_polar(r, t)).collect(), &edges).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cluster_sum_converges_to_log_partition_function((w, mask) in system_strategy()) {
        let sys = build(&w, &mask);
        let all = sys.all();
        let z = polymer_partition_function(&sys, &all).unwrap();
        let cl = clusters(&sys, &all, 7.0).unwrap();
        let s: C64 = cl.iter().map(|c| c.z_t()).sum();
        // At most 5 polymers of weight at most 0.12: geometric tail beyond norm 7.
        let q: f64 = 5.0 * 0.12;
        prop_assert!((s - z.ln()).norm() < 5.0 * q.powi(8) / (1.0 - q));
    }

    #[test]
    fn expansion_respects_its_tail_bound((w, mask) in system_strategy()) {
        let sys = build(&w, &mask);
        let n = sys.len();
        let eta = 0.5;
        let z0: Vec<f64> = (0..n).map(|i| sys.weight(i).norm() * (eta * sys.size(i)).exp()).collect();
        prop_assume!(kp_certificate(&sys, &z0).pass);
        let all = sys.all();
        let e = log_partition_expansion(&sys, &all, 6.0, &Certificate { z0, eta }).unwrap();
        let z = polymer_partition_function(&sys, &all).unwrap();
        prop_assert!((e.value - z.ln()).norm() <= e.tail_bound);
    }

    #[test]
    fn roots_are_recovered_from_expanded_products(
        roots in prop::collection::vec((0.3f64..2.0, 0.0f64..6.28), 1..12),
    ) {
        let rs: Vec<C64> = roots.iter().map(|&(r, t)| C64::from_polar(r, t)).collect();
        let mut c = vec![C64::new(1.0, 0.0)];
        for &r in &rs {
            let mut next = vec![C64::new(0.0, 0.0); c.len() + 1];
            for (k, &ck) in c.iter().enumerate() {
                next[k + 1] += ck;
                next[k] -= ck * r;
            }
            c = next;
        }
        let found = polynomial_roots(&c).unwrap().roots;
        prop_assert_eq!(found.len(), rs.len());
        for r in &rs {
            let d = found.iter().map(|f| (f - r).norm()).fold(f64::INFINITY, f64::min);
            // Close roots are conditioned like the square root of the perturbation.
            let sep = rs.iter().filter(|s| *s != r).map(|s| (s - r).norm()).fold(f64::INFINITY, f64::min);
            prop_assert!(d < 1e-9 || (sep < 1e-2 && d < 1e-5), "root {} off by {}", r, d);
        }
    }
}

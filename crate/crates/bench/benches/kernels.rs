use criterion::{black_box, criterion_group, criterion_main, Criterion};
use pszeros::contours::extract;
use pszeros::metastable::{Geometry, PressureSeries};
use pszeros::polymer::{clusters, PolymerSystem};
use pszeros::torus_exact::{partition_function_exact, partition_polynomial, polynomial_roots, transfer_matrix_pf};
use pszeros::{Configuration, C64};
use pszeros_bench::{blume_capel, ising, probe};

fn exact(c: &mut Criterion) {
    let m = ising(1.0);
    c.bench_function("partition_function_exact ising L=4", |b| {
        b.iter(|| partition_function_exact(&m, black_box(4), probe()))
    });
    c.bench_function("transfer_matrix ising L=6", |b| {
        b.iter(|| transfer_matrix_pf(&m, black_box(6), probe()))
    });
    let bc = blume_capel(1.0, -0.3);
    c.bench_function("partition_polynomial blume-capel L=3", |b| {
        b.iter(|| partition_polynomial(&bc, black_box(3)))
    });
}

fn roots(c: &mut Criterion) {
    let p = partition_polynomial(&blume_capel(1.0, 0.0), 3).unwrap();
    c.bench_function("polynomial_roots degree 18", |b| {
        b.iter(|| polynomial_roots(black_box(&p.coefficients)))
    });
}

fn contours(c: &mut Criterion) {
    let m = ising(1.0);
    let mut spins = vec![m.spin(1).unwrap(); 144];
    for i in [14, 15, 27, 70, 71, 83, 84, 130] {
        spins[i] = m.spin(-1).unwrap();
    }
    let cfg = Configuration::torus(2, 12, spins);
    c.bench_function("extract ising T_12", |b| b.iter(|| extract(black_box(&cfg), 1)));
}

fn series(c: &mut Criterion) {
    let m = blume_capel(1.0, -0.3);
    let geom = Geometry::Plane { d: 2 };
    c.bench_function("pressure series build order 2", |b| {
        b.iter(|| PressureSeries::build(&m, 2, geom.clone(), black_box(2)))
    });
    let s = PressureSeries::build(&m, 2, geom, 3).unwrap();
    c.bench_function("pressure series eval order 3", |b| {
        b.iter(|| s.eval(black_box(probe()), 1.0))
    });
}

fn polymer(c: &mut Criterion) {
    let w: Vec<C64> = (0..6).map(|i| C64::from_polar(0.05, i as f64)).collect();
    let edges: Vec<(usize, usize)> = (0..5).map(|i| (i, i + 1)).collect();
    let sys = PolymerSystem::new(w, &edges).unwrap();
    let all = sys.all();
    c.bench_function("clusters path of 6 up to norm 6", |b| {
        b.iter(|| clusters(&sys, &all, black_box(6.0)))
    });
}

criterion_group!(benches, exact, roots, contours, series, polymer);
criterion_main!(benches);

use blowup_core::bubble::{eval_u, HalfSpacePoint};
use blowup_core::corrector::{solve_vq, GridConfig};
use blowup_core::energy::{compute_phi, EnergyConstants, PhiOptions};
use blowup_core::geometry::generate_sample;
use blowup_core::quadrature::MomentTable;
use blowup_core::Dim;
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn kernels(c: &mut Criterion) {
    let dim = Dim::new(11).unwrap();
    let cp = generate_sample(dim, 7, 1.0).unwrap();

    c.bench_function("eval_u", |b| {
        let p = HalfSpacePoint::new(0.7, vec![0.3; dim.m()]).unwrap();
        b.iter(|| eval_u(dim, black_box(&p)))
    });
    c.bench_function("moment_table", |b| {
        b.iter(|| MomentTable::new(black_box(dim), 1e-10).unwrap())
    });
    c.bench_function("energy_constants", |b| {
        b.iter(|| EnergyConstants::new(black_box(dim), 1e-10).unwrap())
    });

    let mut g = c.benchmark_group("corrector");
    g.sample_size(10);
    let coarse = GridConfig {
        nt: 40,
        nr: 40,
        ..GridConfig::default()
    };
    g.bench_function("solve_vq_40", |b| {
        b.iter(|| solve_vq(black_box(&cp), &coarse).unwrap())
    });
    g.bench_function("solve_vq_default", |b| {
        b.iter(|| solve_vq(black_box(&cp), &GridConfig::default()).unwrap())
    });
    g.finish();

    let sol = solve_vq(&cp, &GridConfig::default()).unwrap();
    let consts = EnergyConstants::new(dim, 1e-10).unwrap();
    c.bench_function("compute_phi", |b| {
        b.iter(|| compute_phi(black_box(&cp), &sol, &consts, &PhiOptions::default()).unwrap())
    });
}

criterion_group!(benches, kernels);
criterion_main!(benches);

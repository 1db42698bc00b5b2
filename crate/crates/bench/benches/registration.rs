use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use r2n2_bench::case;
use r2n2_core::baseline::{register_bspline, BaselineConfig};
use r2n2_core::deform::{gaussian_local_field, LocalDeformParams};
use r2n2_core::geometry::{make_grid, warp};
use r2n2_core::net::{register, NetConfig, R2N2Net};
use r2n2_core::train::loss_and_gradients;

fn kernels(c: &mut Criterion) {
    let grid = make_grid(64, 64).unwrap();
    let p = LocalDeformParams::from_slice(&[0.1, -0.2, 0.05, 0.02, 0.7, 0.3, -0.4]);
    c.bench_function("gaussian_local_field_64", |b| {
        b.iter(|| gaussian_local_field(black_box(&p), &grid).unwrap())
    });
    let pair = case(64, 0);
    c.bench_function("warp_64", |b| b.iter(|| warp(black_box(&pair.moving), &pair.truth_field).unwrap()));
}

fn methods(c: &mut Criterion) {
    let pair = case(64, 1);
    let net = R2N2Net::new(NetConfig::toy(64, 16), 0).unwrap();
    let mut g = c.benchmark_group("register_64");
    g.sample_size(10);
    g.bench_function("r2n2_t25", |b| b.iter(|| register(&net, &pair.fixed, &pair.moving, 25).unwrap()));
    g.bench_function("bspline_scaled", |b| {
        b.iter(|| register_bspline(&pair.fixed, &pair.moving, &BaselineConfig::scaled()).unwrap())
    });
    g.bench_function("train_step_t25", |b| {
        b.iter(|| loss_and_gradients(&net, &pair.fixed, &pair.moving, 25, 0.1, None).unwrap())
    });
    g.finish();
}

criterion_group!(benches, kernels, methods);
criterion_main!(benches);

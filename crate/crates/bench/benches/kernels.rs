//! Microbenchmarks for the hot kernels of the registration pipeline.
//!
//! Sizes are chosen so a full run stays in the seconds range while still
//! exercising cache behaviour beyond L2. The fields are smooth, like the
//! ones the solver actually produces; warp cost is interpolation-bound and
//! does not depend on field content, but compose and integrate do.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use lungreg_core::cascade::{
    gaussian_smooth, variational_gradient, variational_loss, CascadeConfig,
};
use lungreg_core::diffeo::integrate_svf;
use lungreg_core::field::{compose, jacobian_determinant, warp};
use lungreg_core::synth::{make_phantom, make_smooth_svf};

const DIMS: [usize; 3] = [64, 64, 64];

fn bench_warp(c: &mut Criterion) {
    let vol = make_phantom(1, DIMS);
    let df = make_smooth_svf(2, DIMS, 3.0, 4.0).unwrap();
    c.bench_function("warp_64", |b| {
        b.iter(|| warp(black_box(&vol), black_box(&df)).unwrap())
    });
}

fn bench_compose(c: &mut Criterion) {
    let a = make_smooth_svf(3, DIMS, 3.0, 4.0).unwrap();
    let f = make_smooth_svf(4, DIMS, 3.0, 4.0).unwrap();
    c.bench_function("compose_64", |b| {
        b.iter(|| compose(black_box(&a), black_box(&f)).unwrap())
    });
}

fn bench_integrate(c: &mut Criterion) {
    let v = make_smooth_svf(5, DIMS, 2.0, 4.0).unwrap().scaled(1.0 / 128.0);
    c.bench_function("integrate_svf_64_t7", |b| {
        b.iter(|| integrate_svf(black_box(&v), 7).unwrap())
    });
}

fn bench_jacobian(c: &mut Criterion) {
    let df = make_smooth_svf(6, DIMS, 3.0, 4.0).unwrap();
    c.bench_function("jacobian_det_64", |b| {
        b.iter(|| jacobian_determinant(black_box(&df)).unwrap())
    });
}

fn bench_gaussian(c: &mut Criterion) {
    let vol = make_phantom(7, DIMS);
    c.bench_function("gaussian_smooth_64_s2", |b| {
        b.iter(|| gaussian_smooth(black_box(&vol), 2.0))
    });
}

fn bench_loss_and_gradient(c: &mut Criterion) {
    let fixed = make_phantom(8, DIMS);
    let moving = make_phantom(9, DIMS);
    let flow = make_smooth_svf(10, DIMS, 2.0, 4.0).unwrap();
    let cfg = CascadeConfig::default();
    c.bench_function("variational_loss_64", |b| {
        b.iter(|| variational_loss(black_box(&fixed), black_box(&moving), black_box(&flow), &cfg).unwrap())
    });
    c.bench_function("variational_gradient_64", |b| {
        b.iter(|| {
            variational_gradient(black_box(&fixed), black_box(&moving), black_box(&flow), &cfg)
                .unwrap()
        })
    });
}

criterion_group! {
    name = kernels;
    config = Criterion::default().sample_size(10);
    targets = bench_warp, bench_compose, bench_integrate, bench_jacobian,
        bench_gaussian, bench_loss_and_gradient
}
criterion_main!(kernels);

use std::hint::black_box;

use cps_core::constraints::{extract, waveform_features};
use cps_core::metrics::{dtw, ssim};
use cps_core::projection::{closed_form_affine_eq, SetProjector};
use cps_core::rng::{self, Purpose};
use cps_core::sampler::{cps_step, GammaRule};
use cps_core::series::{generate_waveforms, sinusoid};
use cps_core::*;
use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::DMatrix;

const L: usize = 96;

fn noise(index: u64, n: usize) -> Vec<f64> {
    rng::normals(&mut rng::stream(0, index, Purpose::Selection, 0), n)
}

fn metrics(c: &mut Criterion) {
    let a = sinusoid(L, 0.8, 3.0, 0.1);
    let b = sinusoid(L, 0.6, 4.0, 1.3);
    c.bench_function("dtw_96", |bench| bench.iter(|| dtw(black_box(&a), black_box(&b)).unwrap()));
    c.bench_function("ssim_96", |bench| bench.iter(|| ssim(black_box(&a), black_box(&b)).unwrap()));
}

fn projection(c: &mut Criterion) {
    let reference = sinusoid(L, 0.8, 3.0, 0.1);
    let set = extract(&reference, &waveform_features(10), 0.005).unwrap();
    let projector = SetProjector::new(set, 1, L, ProjectionConfig::default()).unwrap();
    let z_hat = TimeSeries::univariate(noise(1, L)).unwrap();
    for gamma in [10.0, 1e5] {
        c.bench_function(&format!("hinge_projection_10_constraints_gamma_{gamma:e}"), |bench| {
            bench.iter(|| projector.project(black_box(&z_hat), gamma, None).unwrap())
        });
    }

    let (m, n) = (16, L);
    let a = DMatrix::from_vec(m, n, noise(2, m * n));
    let sys = AffineSystem::equalities(&a, &noise(3, m)).unwrap();
    c.bench_function("closed_form_projection_16x96", |bench| {
        bench.iter(|| closed_form_affine_eq(black_box(&z_hat), &sys, 100.0).unwrap())
    });
}

fn sampler_step(c: &mut Criterion) {
    let ds = series::normalize(&generate_waveforms(64, L, (0.1, 1.0), 0).unwrap()).unwrap();
    let schedule = Schedule::linear(200, 1e-4, 0.02).unwrap();
    let model = LearnedDenoiser::new(1, L, schedule.clone(), &TrainConfig::default()).unwrap();
    let set = extract(&ds.samples()[0], &waveform_features(10), 0.005).unwrap();
    let projector = SetProjector::new(set, 1, L, ProjectionConfig::default()).unwrap();
    let z = TimeSeries::univariate(noise(4, L)).unwrap();
    c.bench_function("cps_step_mlp_t100", |bench| {
        bench.iter(|| {
            cps_step(&model, &schedule, Some(&projector), GammaRule::Exponential, black_box(&z), 100, None, None)
                .unwrap()
        })
    });
    c.bench_function("ddim_step_mlp_t100", |bench| {
        bench.iter(|| cps_step(&model, &schedule, None, GammaRule::Exponential, black_box(&z), 100, None, None).unwrap())
    });
}

criterion_group!(benches, metrics, projection, sampler_step);
criterion_main!(benches);

use cps_core::constraints::{extract, waveform_features};
use cps_core::metrics::{dtw, evaluate};
use cps_core::sampler::{batch, cps_sample, ddim_sample};
use cps_core::series::{read_csv, sinusoid, write_csv};
use cps_core::*;

const L: usize = 96;

fn denoiser() -> GaussianDenoiser {
    let mu = sinusoid(L, 0.5, 2.0, 0.0);
    GaussianDenoiser::new(mu, Schedule::linear(100, 1e-4, 0.02).unwrap())
}

fn reference() -> TimeSeries {
    sinusoid(L, 0.9, 3.0, 0.7)
}

#[test]
fn cps_samples_satisfy_extracted_features() {
    let d = denoiser();
    let set = extract(&reference(), &waveform_features(5), 0.005).unwrap();
    let cfg = SamplerConfig { seed: 11, ..SamplerConfig::default() };
    let reports = batch(8, |i| cps_sample(&d, &set, &cfg, i)).unwrap();
    for r in &reports {
        assert!(r.feasible(), "per-constraint violation {:?}", r.per_constraint);
        assert!(r.converged);
        assert_eq!(r.steps, 100);
    }

    // the batch is the same as drawing one at a time
    let single = cps_sample(&d, &set, &cfg, 5).unwrap();
    assert_eq!(single.sample, reports[5].sample);
}

#[test]
fn constraints_pull_samples_towards_the_reference() {
    let d = denoiser();
    let r = reference();
    let set = extract(&r, &waveform_features(10), 0.005).unwrap();
    let cfg = SamplerConfig::default();
    let (mut free, mut constrained) = (0.0, 0.0);
    for i in 0..6 {
        free += dtw(&ddim_sample(&d, &cfg, i).unwrap().sample, &r).unwrap();
        constrained += dtw(&cps_sample(&d, &set, &cfg, i).unwrap().sample, &r).unwrap();
    }
    assert!(constrained < free, "constrained {constrained} vs free {free}");
}

#[test]
fn samples_survive_a_csv_round_trip_and_score_as_identical() {
    let d = denoiser();
    let cfg = SamplerConfig { seed: 2, eta: 1.0, ..SamplerConfig::default() };
    let samples: Vec<TimeSeries> = batch(4, |i| ddim_sample(&d, &cfg, i)).unwrap().into_iter().map(|r| r.sample).collect();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("samples.csv");
    write_csv(&Dataset::new(samples.clone()).unwrap(), &path).unwrap();
    let back = read_csv(&path).unwrap();
    assert_eq!(back.samples(), samples.as_slice());

    let (report, _) = evaluate(back.samples(), &samples, None, None).unwrap();
    assert_eq!(report.dtw_mean, 0.0);
    assert_eq!(report.ssim_mean, 1.0);
}

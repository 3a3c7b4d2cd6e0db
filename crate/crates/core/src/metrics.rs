//! Sample-quality and constraint metrics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::series::TimeSeries;
use crate::{CpsError, Result};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
const FRECHET_JITTER: f64 = 1e-6;

/// Features per channel used by [`feature_frechet`], in order.
pub const FEATURE_NAMES: [&str; 6] = ["mean", "std", "min", "max", "lag1_autocorr", "mean_abs_change"];

/// Dynamic time warping with match/insert/delete moves of unit weight, no
/// window, and the Euclidean distance across channels as the local cost.
/// Returns the unnormalised cumulative cost.
pub fn dtw(a: &TimeSeries, b: &TimeSeries) -> Result<f64> {
    if a.channels() != b.channels() {
        return Err(CpsError::ShapeMismatch {
            expected: (a.channels(), b.horizon()),
            got: b.shape(),
        });
    }
    let (la, lb) = (a.horizon(), b.horizon());
    let cost = |i: usize, j: usize| {
        (0..a.channels())
            .map(|k| {
                let d = a.get(k, i) - b.get(k, j);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    };
    let mut prev = vec![f64::INFINITY; lb + 1];
    let mut cur = vec![f64::INFINITY; lb + 1];
    prev[0] = 0.0;
    for i in 1..=la {
        cur[0] = f64::INFINITY;
        for j in 1..=lb {
            let best = prev[j].min(cur[j - 1]).min(prev[j - 1]);
            cur[j] = cost(i - 1, j - 1) + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[lb])
}

/// Mean SSIM over all full windows of every channel. Statistics inside a
/// window are population moments.
pub fn ssim_1d(a: &TimeSeries, b: &TimeSeries, window: usize, c1: f64, c2: f64) -> Result<f64> {
    b.check_shape(a.shape())?;
    let l = a.horizon();
    if window == 0 || window.is_multiple_of(2) || window > l {
        return Err(CpsError::invalid(format!(
            "SSIM window must be odd and between 1 and the horizon {l}, got {window}"
        )));
    }
    let positions = l - window + 1;
    let mut total = 0.0;
    for k in 0..a.channels() {
        let (x, y) = (a.channel(k), b.channel(k));
        for p in 0..positions {
            let (wx, wy) = (&x[p..p + window], &y[p..p + window]);
            let (mx, my) = (mean(wx), mean(wy));
            let (vx, vy, cxy) = (cov(wx, mx, wx, mx), cov(wy, my, wy, my), cov(wx, mx, wy, my));
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (positions * a.channels()) as f64)
}

/// SSIM with the default window and constants.
pub fn ssim(a: &TimeSeries, b: &TimeSeries) -> Result<f64> {
    ssim_1d(a, b, SSIM_WINDOW.min(largest_odd(a.horizon())), SSIM_C1, SSIM_C2)
}

fn largest_odd(n: usize) -> usize {
    if n % 2 == 1 {
        n
    } else {
        n.saturating_sub(1).max(1)
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn cov(x: &[f64], mx: f64, y: &[f64], my: f64) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / x.len() as f64
}

/// `(rate, magnitude)`: the fraction of samples with any constraint over
/// budget, and the mean over samples of the summed excess.
pub fn violation_stats(samples: &[TimeSeries], set: &ConstraintSet) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(CpsError::EmptyDataset);
    }
    let per: Vec<Vec<f64>> = samples.par_iter().map(|s| set.per_constraint_violation(s)).collect();
    let violating = per.iter().filter(|v| v.iter().any(|x| *x > 0.0)).count();
    let magnitude = per.iter().map(|v| v.iter().sum::<f64>()).sum::<f64>() / samples.len() as f64;
    Ok((violating as f64 / samples.len() as f64, magnitude))
}

/// Fixed feature vector: [`FEATURE_NAMES`] for each channel in turn.
pub fn features(s: &TimeSeries) -> Vec<f64> {
    let mut out = Vec::with_capacity(FEATURE_NAMES.len() * s.channels());
    for k in 0..s.channels() {
        let x = s.channel(k);
        let m = mean(x);
        let var = cov(x, m, x, m);
        let min = x.iter().copied().fold(f64::INFINITY, f64::min);
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = x.iter().map(|v| (v - m) * (v - m)).sum();
        let lag1 = if denom > 0.0 {
            x.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum::<f64>() / denom
        } else {
            0.0
        };
        let mac = if x.len() > 1 {
            x.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / (x.len() - 1) as f64
        } else {
            0.0
        };
        out.extend([m, var.sqrt(), min, max, lag1, mac]);
    }
    out
}

fn moments(samples: &[TimeSeries]) -> (DVector<f64>, DMatrix<f64>) {
    let feats: Vec<Vec<f64>> = samples.par_iter().map(features).collect();
    let d = feats[0].len();
    let n = feats.len() as f64;
    let mut mu = DVector::zeros(d);
    for f in &feats {
        mu += DVector::from_column_slice(f);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(d, d);
    for f in &feats {
        let c = DVector::from_column_slice(f) - &mu;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

fn jitter_if_singular(c: &mut DMatrix<f64>, side: &str) {
    let eig = SymmetricEigen::new(c.clone()).eigenvalues;
    let (lo, hi) = (eig.min(), eig.amax());
    if lo <= 1e-12 * hi.max(1.0) {
        log::info!("{side} feature covariance is singular; adding {FRECHET_JITTER:e} diagonal jitter");
        for i in 0..c.nrows() {
            c[(i, i)] += FRECHET_JITTER;
        }
    }
}

/// Gaussian Fréchet distance between feature clouds:
/// `||mu_r - mu_g||^2 + tr(S_r + S_g - 2 (S_r S_g)^{1/2})`.
pub fn feature_frechet(real: &[TimeSeries], gen: &[TimeSeries]) -> Result<f64> {
    if real.len() < 2 || gen.len() < 2 {
        return Err(CpsError::invalid("feature Fréchet distance needs at least two samples on each side"));
    }
    let shape = real[0].shape();
    for s in real.iter().chain(gen) {
        s.check_shape(shape)?;
    }
    let (mr, mut cr) = moments(real);
    let (mg, mut cg) = moments(gen);
    jitter_if_singular(&mut cr, "real");
    jitter_if_singular(&mut cg, "generated");
    let sr = sym_sqrt(&cr);
    let inner = &sr * &cg * &sr;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let fd = (mr - mg).norm_squared() + cr.trace() + cg.trace() - 2.0 * cross;
    Ok(fd.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub index: usize,
    pub dtw: f64,
    pub ssim: f64,
    pub violation: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: usize,
    pub dtw_mean: f64,
    pub dtw_std: f64,
    pub dtw_median: f64,
    pub ssim_mean: f64,
    pub violation_rate: Option<f64>,
    pub violation_magnitude: Option<f64>,
    pub feature_fd: Option<f64>,
}

/// Pairwise DTW/SSIM of generated samples against references (paired by
/// index), violation statistics and, when real data is given, the feature FD.
pub fn evaluate(
    gen: &[TimeSeries],
    refs: &[TimeSeries],
    set: Option<&ConstraintSet>,
    real: Option<&[TimeSeries]>,
) -> Result<(MetricReport, Vec<PairMetrics>)> {
    if gen.is_empty() {
        return Err(CpsError::EmptyDataset);
    }
    if gen.len() != refs.len() {
        return Err(CpsError::invalid(format!(
            "{} generated samples but {} references",
            gen.len(),
            refs.len()
        )));
    }
    let rows: Vec<PairMetrics> = gen
        .par_iter()
        .zip(refs)
        .enumerate()
        .map(|(index, (g, r))| {
            g.check_shape(r.shape())?;
            Ok(PairMetrics {
                index,
                dtw: dtw(g, r)?,
                ssim: ssim(g, r)?,
                violation: set.map(|s| s.per_constraint_violation(g).iter().sum()),
            })
        })
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let dtw_mean = rows.iter().map(|r| r.dtw).sum::<f64>() / n;
    let dtw_std = (rows.iter().map(|r| (r.dtw - dtw_mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut d: Vec<f64> = rows.iter().map(|r| r.dtw).collect();
    let dtw_median = crate::analysis::median(&mut d);
    let ssim_mean = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
    let (violation_rate, violation_magnitude) = match set {
        Some(s) => {
            let (r, m) = violation_stats(gen, s)?;
            (Some(r), Some(m))
        }
        None => (None, None),
    };
    let feature_fd = match real {
        Some(r) => Some(feature_frechet(r, gen)?),
        None => None,
    };
    Ok((
        MetricReport {
            samples: rows.len(),
            dtw_mean,
            dtw_std,
            dtw_median,
            ssim_mean,
            violation_rate,
            violation_magnitude,
            feature_fd,
        },
        rows,
    ))
}

pub fn pair_metrics_csv(rows: &[PairMetrics]) -> String {
    let mut s = String::from("index,dtw,ssim,violation\n");
    for r in rows {
        let v = r.violation.map(|v| format!("{v:?}")).unwrap_or_default();
        s.push_str(&format!("{},{:?},{:?},{}\n", r.index, r.dtw, r.ssim, v));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{Constraint, ConstraintKind};
    use crate::rng::{self, Purpose};
    use crate::series::generate_waveforms;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn uni(v: &[f64]) -> TimeSeries {
        TimeSeries::univariate(v.to_vec()).unwrap()
    }

    #[test]
    fn dtw_examples() {
        let a = uni(&[0.3, -1.0, 2.0]);
        assert_eq!(dtw(&a, &a).unwrap(), 0.0);
        assert_eq!(dtw(&uni(&[0.0, 0.0, 1.0]), &uni(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(dtw(&uni(&[0.0]), &uni(&[3.0])).unwrap(), 3.0);
        assert!(dtw(&uni(&[0.0]), &TimeSeries::zeros(2, 1)).is_err());
    }

    #[test]
    fn dtw_uses_euclidean_cost_across_channels() {
        let a = TimeSeries::from_channels(&[vec![0.0], vec![0.0]]).unwrap();
        let b = TimeSeries::from_channels(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(dtw(&a, &b).unwrap(), 5.0);
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let w = generate_waveforms(5, 96, (0.1, 1.0), 2).unwrap();
        for s in w.samples() {
            assert_eq!(ssim(s, s).unwrap(), 1.0);
        }
    }

    #[test]
    fn ssim_negated_zero_mean_window_is_minus_one() {
        // Every length-3 window of this signal has mean zero.
        let a = TimeSeries::univariate(vec![1.0, -2.0, 1.0]).unwrap();
        let b = a.combine(-1.0, &a, 0.0).unwrap();
        // The stabilising constant keeps it just above -1.
        assert_relative_eq!(ssim(&a, &b).unwrap(), -1.0, epsilon = 1e-3);
    }

    #[test]
    fn ssim_constant_signals_hand_value() {
        let (ma, mb) = (0.4, 0.7);
        let a = uni(&[ma; 9]);
        let b = uni(&[mb; 9]);
        let v = ssim_1d(&a, &b, 9, SSIM_C1, SSIM_C2).unwrap();
        assert_relative_eq!(v, (2.0 * ma * mb + SSIM_C1) / (ma * ma + mb * mb + SSIM_C1), epsilon = 1e-15);
    }

    #[test]
    fn ssim_rejects_bad_window() {
        let a = uni(&[0.0; 8]);
        assert!(ssim_1d(&a, &a, 4, SSIM_C1, SSIM_C2).is_err());
        assert!(ssim_1d(&a, &a, 9, SSIM_C1, SSIM_C2).is_err());
        assert!(ssim_1d(&a, &uni(&[0.0; 7]), 3, SSIM_C1, SSIM_C2).is_err());
    }

    #[test]
    fn violation_stats_examples() {
        let set = ConstraintSet::new(vec![Constraint::new(0, ConstraintKind::Mean { target: 0.0 })]);
        let ok = uni(&[0.0, 0.0]);
        assert_eq!(violation_stats(&[ok.clone(), ok.clone()], &set).unwrap(), (0.0, 0.0));
        // raw violation 2.01, minus budget 0.01
        let bad = uni(&[2.01, 2.01]);
        let (rate, mag) = violation_stats(&[ok.clone(), ok.clone(), ok.clone(), bad], &set).unwrap();
        assert_eq!(rate, 0.25);
        assert_relative_eq!(mag, 0.5, epsilon = 1e-12);
        let loose = set.clone().with_budget(10.0);
        assert_eq!(violation_stats(&[uni(&[2.0, 2.0])], &loose).unwrap(), (0.0, 0.0));
        assert!(violation_stats(&[], &set).is_err());
    }

    #[test]
    fn frechet_identical_is_zero() {
        let w = generate_waveforms(200, 32, (0.1, 1.0), 3).unwrap();
        let fd = feature_frechet(w.samples(), w.samples()).unwrap();
        assert!(fd <= 1e-8, "{fd}");
    }

    #[test]
    fn frechet_shift_lower_bound() {
        let w = generate_waveforms(200, 32, (0.1, 1.0), 3).unwrap();
        let c = 0.7;
        let shifted: Vec<TimeSeries> = w
            .samples()
            .iter()
            .map(|s| TimeSeries::univariate(s.as_slice().iter().map(|v| v + c).collect()).unwrap())
            .collect();
        let fd = feature_frechet(w.samples(), &shifted).unwrap();
        assert!(fd >= c * c);
        // mean, min and max move by c; the rest is unchanged
        assert_relative_eq!(fd, 3.0 * c * c, epsilon = 1e-6);
    }

    #[test]
    fn frechet_separates_amplitude_ranges() {
        let low = generate_waveforms(300, 32, (0.1, 0.3), 4).unwrap();
        let high = generate_waveforms(300, 32, (0.8, 1.0), 5).unwrap();
        let mid = generate_waveforms(300, 32, (0.2, 0.4), 6).unwrap();
        let far = feature_frechet(low.samples(), high.samples()).unwrap();
        let near = feature_frechet(low.samples(), mid.samples()).unwrap();
        assert!(far > 0.0 && far > near, "{far} vs {near}");
    }

    #[test]
    fn evaluate_identical_batches() {
        let w = generate_waveforms(6, 24, (0.1, 1.0), 7).unwrap();
        let (rep, rows) = evaluate(w.samples(), w.samples(), None, Some(w.samples())).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rep.dtw_mean, 0.0);
        assert_eq!(rep.ssim_mean, 1.0);
        assert!(pair_metrics_csv(&rows).lines().count() == 7);
        assert!(evaluate(w.samples(), &w.samples()[..3], None, None).is_err());
    }

    proptest! {
        #[test]
        fn dtw_is_symmetric(seed in 0u64..10_000, la in 1usize..9, lb in 1usize..9) {
            let mut r = rng::stream(seed, 0, Purpose::Selection, 8);
            let a = TimeSeries::new(2, la, rng::normals(&mut r, 2 * la)).unwrap();
            let b = TimeSeries::new(2, lb, rng::normals(&mut r, 2 * lb)).unwrap();
            prop_assert_eq!(dtw(&a, &b).unwrap(), dtw(&b, &a).unwrap());
        }

        #[test]
        fn ssim_is_bounded(seed in 0u64..10_000) {
            let mut r = rng::stream(seed, 0, Purpose::Selection, 9);
            let a = TimeSeries::new(1, 20, rng::normals(&mut r, 20)).unwrap();
            let b = TimeSeries::new(1, 20, rng::normals(&mut r, 20)).unwrap();
            let v = ssim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&v));
        }

        #[test]
        fn frechet_is_nonnegative(seed in 0u64..1000) {
            let a = generate_waveforms(20, 16, (0.1, 1.0), seed).unwrap();
            let b = generate_waveforms(20, 16, (0.1, 1.0), seed + 1).unwrap();
            prop_assert!(feature_frechet(a.samples(), b.samples()).unwrap() >= 0.0);
        }
    }
}

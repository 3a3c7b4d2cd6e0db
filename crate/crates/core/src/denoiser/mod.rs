//! Noise predictors and the posterior-mean transform.

mod gaussian;
mod mlp;

pub use gaussian::GaussianDenoiser;
pub use mlp::{train, train_from, LearnedDenoiser, TrainConfig, TrainLog, TrainRecord};

use crate::schedule::Schedule;
use crate::series::TimeSeries;
use crate::{CpsError, Result};

pub trait Denoiser: Send + Sync {
    /// `(channels, horizon)` of the samples this denoiser accepts.
    fn shape(&self) -> (usize, usize);

    fn schedule(&self) -> &Schedule;

    /// Noise estimate `eps_hat(z_t, t)` for `t` in `1..=T`.
    fn predict_noise(&self, z: &TimeSeries, t: usize) -> Result<TimeSeries>;

    /// Noise estimate together with the posterior mean estimate.
    fn estimate(&self, z: &TimeSeries, t: usize) -> Result<(TimeSeries, TimeSeries)> {
        let eps = self.predict_noise(z, t)?;
        let z0 = posterior_mean_from(self.schedule(), z, &eps, t)?;
        Ok((eps, z0))
    }

    fn posterior_mean(&self, z: &TimeSeries, t: usize) -> Result<TimeSeries> {
        self.estimate(z, t).map(|(_, z0)| z0)
    }
}

/// `(z_t - sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_bar_t)`.
pub fn posterior_mean_from(schedule: &Schedule, z: &TimeSeries, eps: &TimeSeries, t: usize) -> Result<TimeSeries> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    if ab == 0.0 {
        return Err(CpsError::TerminalNoise { t });
    }
    z.combine(1.0 / ab.sqrt(), eps, -(1.0 - ab).sqrt() / ab.sqrt())
}

pub(crate) fn check_input(d: &dyn Denoiser, z: &TimeSeries, t: usize) -> Result<()> {
    d.schedule().check_step(t)?;
    z.check_shape(d.shape())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Purpose};
    use crate::series::forward_noise;

    /// Returns a fixed noise array regardless of input.
    struct Oracle {
        eps: TimeSeries,
        schedule: Schedule,
    }

    impl Denoiser for Oracle {
        fn shape(&self) -> (usize, usize) {
            self.eps.shape()
        }
        fn schedule(&self) -> &Schedule {
            &self.schedule
        }
        fn predict_noise(&self, _z: &TimeSeries, _t: usize) -> Result<TimeSeries> {
            Ok(self.eps.clone())
        }
    }

    #[test]
    fn exact_noise_recovers_clean_sample() {
        let schedule = Schedule::linear(50, 1e-4, 0.02).unwrap();
        let mut r = rng::stream(3, 0, Purpose::Selection, 0);
        let z0 = TimeSeries::new(2, 5, rng::normals(&mut r, 10)).unwrap();
        let eps = TimeSeries::new(2, 5, rng::normals(&mut r, 10)).unwrap();
        let d = Oracle { eps: eps.clone(), schedule };
        for t in [1, 17, 50] {
            let zt = forward_noise(&z0, t, d.schedule(), &eps).unwrap();
            let back = d.posterior_mean(&zt, t).unwrap();
            assert!(back.distance(&z0) <= 1e-10 * (1.0 + z0.norm()));
        }
    }

    #[test]
    fn near_unit_alpha_bar_returns_input() {
        let schedule = Schedule::linear(1, 1e-14, 1e-14).unwrap();
        let eps = TimeSeries::univariate(vec![3.0]).unwrap();
        let z = TimeSeries::univariate(vec![0.7]).unwrap();
        let out = posterior_mean_from(&schedule, &z, &eps, 1).unwrap();
        assert!((out.get(0, 0) - 0.7).abs() < 1e-6);
    }

    #[test]
    fn terminal_noise_is_guarded() {
        let schedule = Schedule::linear_alpha_bar(4).unwrap();
        let z = TimeSeries::univariate(vec![1.0]).unwrap();
        let err = posterior_mean_from(&schedule, &z, &z, 4).unwrap_err();
        assert!(matches!(err, CpsError::TerminalNoise { t: 4 }));
    }
}

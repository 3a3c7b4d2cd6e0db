use super::{check_input, Denoiser};
use crate::schedule::Schedule;
use crate::series::TimeSeries;
use crate::Result;

/// Optimal noise predictor for data distributed as `N(mu, I)`.
#[derive(Clone, Debug)]
pub struct GaussianDenoiser {
    mu: TimeSeries,
    schedule: Schedule,
}

impl GaussianDenoiser {
    pub fn new(mu: TimeSeries, schedule: Schedule) -> Self {
        Self { mu, schedule }
    }

    pub fn mu(&self) -> &TimeSeries {
        &self.mu
    }
}

impl Denoiser for GaussianDenoiser {
    fn shape(&self) -> (usize, usize) {
        self.mu.shape()
    }

    fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    /// `-sqrt(1 - ab) (sqrt(ab) mu - z)`
    fn predict_noise(&self, z: &TimeSeries, t: usize) -> Result<TimeSeries> {
        check_input(self, z, t)?;
        let ab = self.schedule.alpha_bar(t);
        let s = (1.0 - ab).sqrt();
        z.combine(s, &self.mu, -s * ab.sqrt())
    }

    /// The posterior mean has the closed form `sqrt(ab) z + (1 - ab) mu`, which
    /// stays defined at `ab = 0`.
    fn estimate(&self, z: &TimeSeries, t: usize) -> Result<(TimeSeries, TimeSeries)> {
        let eps = self.predict_noise(z, t)?;
        let ab = self.schedule.alpha_bar(t);
        let z0 = z.combine(ab.sqrt(), &self.mu, 1.0 - ab)?;
        Ok((eps, z0))
    }
}

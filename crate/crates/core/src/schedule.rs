//! Diffusion noise coefficients, DDIM control parameters and the penalty schedule.

use serde::{Deserialize, Serialize};

use crate::{CpsError, Result};

/// Default cap on the penalty coefficient.
pub const DEFAULT_GAMMA_CLIP: f64 = 100_000.0;

/// Immutable diffusion schedule.
///
/// Indexing follows the usual convention: `alpha_bar(0) == 1` and steps run
/// `1..=T`. `beta`/`sigma` are stored 0-based internally (`betas[t - 1]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
    gamma_clip: f64,
}

impl Schedule {
    /// Linearly spaced betas from `beta_min` to `beta_max` over `steps` steps.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 1 {
            return Err(CpsError::invalid("step count must be at least 1"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(CpsError::invalid(format!(
                "betas must satisfy 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_min]
        } else {
            (0..steps)
                .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Schedule from explicit betas, each in `(0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(CpsError::invalid("step count must be at least 1"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(CpsError::invalid(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let steps = betas.len();
        let s = Schedule {
            betas,
            alpha_bars,
            sigmas: vec![0.0; steps],
            gamma_clip: DEFAULT_GAMMA_CLIP,
        };
        s.validate()?;
        Ok(s)
    }

    /// Schedule from `alpha_bar(0..=T)`. Allows an exact terminal zero.
    pub fn from_alpha_bars(alpha_bars: Vec<f64>) -> Result<Self> {
        if alpha_bars.len() < 2 {
            return Err(CpsError::invalid("need alpha_bar for at least t = 0 and t = 1"));
        }
        if alpha_bars[0] != 1.0 {
            return Err(CpsError::invalid("alpha_bar(0) must equal 1"));
        }
        let betas = alpha_bars
            .windows(2)
            .map(|w| 1.0 - w[1] / w[0])
            .collect::<Vec<_>>();
        let steps = betas.len();
        let s = Schedule {
            betas,
            alpha_bars,
            sigmas: vec![0.0; steps],
            gamma_clip: DEFAULT_GAMMA_CLIP,
        };
        s.validate()?;
        Ok(s)
    }

    /// `alpha_bar(t) = 1 - t / T`: exact endpoints 1 and 0.
    pub fn linear_alpha_bar(steps: usize) -> Result<Self> {
        if steps < 1 {
            return Err(CpsError::invalid("step count must be at least 1"));
        }
        let ab = (0..=steps)
            .map(|t| 1.0 - t as f64 / steps as f64)
            .collect();
        Self::from_alpha_bars(ab)
    }

    /// Standard DDIM interpolation `sigma_t = eta * sqrt((1 - a_{t-1}) / (1 - a_t)) * sqrt(1 - a_t / a_{t-1})`,
    /// with `sigma_1` forced to zero.
    pub fn with_eta(mut self, eta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(CpsError::invalid(format!("eta {eta} outside [0, 1]")));
        }
        for t in 1..=self.steps() {
            let prev = self.alpha_bars[t - 1];
            let cur = self.alpha_bars[t];
            let sigma = if t == 1 || eta == 0.0 {
                0.0
            } else {
                eta * ((1.0 - prev) / (1.0 - cur)).sqrt() * (1.0 - cur / prev).sqrt()
            };
            self.sigmas[t - 1] = sigma.min((1.0 - prev).max(0.0).sqrt());
        }
        self.validate()?;
        Ok(self)
    }

    pub fn with_gamma_clip(mut self, clip: f64) -> Result<Self> {
        if !(clip > 0.0) {
            return Err(CpsError::invalid(format!("gamma clip must be positive, got {clip}")));
        }
        self.gamma_clip = clip;
        Ok(self)
    }

    /// Check the schedule invariants; used after deserialisation.
    pub fn validate(&self) -> Result<()> {
        let ab = &self.alpha_bars;
        if self.betas.is_empty() || ab.len() != self.betas.len() + 1 || self.sigmas.len() != self.betas.len() {
            return Err(CpsError::invalid("schedule arrays have inconsistent lengths"));
        }
        if !(self.gamma_clip > 0.0) {
            return Err(CpsError::invalid("gamma clip must be positive"));
        }
        if ab[0] != 1.0 {
            return Err(CpsError::invalid("alpha_bar(0) must equal 1"));
        }
        for t in 1..ab.len() {
            if !(0.0..=1.0).contains(&ab[t]) {
                return Err(CpsError::invalid(format!("alpha_bar({t}) = {} outside [0, 1]", ab[t])));
            }
            if !(ab[t] < ab[t - 1]) {
                return Err(CpsError::invalid(format!(
                    "alpha_bar must strictly decrease; alpha_bar({t}) = {} >= alpha_bar({}) = {}",
                    ab[t],
                    t - 1,
                    ab[t - 1]
                )));
            }
        }
        if self.sigmas[0] != 0.0 {
            return Err(CpsError::invalid("sigma_1 must be zero"));
        }
        for t in 1..=self.steps() {
            let s = self.sigmas[t - 1];
            if s < 0.0 || 1.0 - ab[t - 1] - s * s < -1e-15 {
                return Err(CpsError::invalid(format!("sigma({t}) = {s} too large for alpha_bar")));
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `alpha_bar(t)` for `t` in `0..=T`. Panics outside that range.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `beta(t)` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// DDIM `sigma(t)` for `t` in `1..=T`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn gamma_clip(&self) -> f64 {
        self.gamma_clip
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(CpsError::StepOutOfRange {
                t,
                steps: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    /// `min(exp(1 / (1 - alpha_bar(t-1))), gamma_clip)`.
    pub fn penalty_coefficient(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(penalty_from_alpha_bar(self.alpha_bars[t - 1], self.gamma_clip))
    }
}

fn penalty_from_alpha_bar(prev: f64, clip: f64) -> f64 {
    let gap = 1.0 - prev;
    if gap <= 0.0 {
        return clip;
    }
    (1.0 / gap).exp().min(clip)
}

/// Penalty schedule under which the convergence bound is stated:
/// `2k(T - t + 1) / lambda_min(A^T A)`. Never clipped.
pub fn theorem2_penalty(t: usize, steps: usize, k: f64, lambda_min: f64) -> Result<f64> {
    if !(k > 1.0) {
        return Err(CpsError::invalid(format!("design parameter k must exceed 1, got {k}")));
    }
    if !(lambda_min > 0.0) {
        return Err(CpsError::invalid(format!(
            "lambda_min must be positive, got {lambda_min}"
        )));
    }
    if t == 0 || t > steps {
        return Err(CpsError::StepOutOfRange { t, steps });
    }
    Ok(2.0 * k * (steps - t + 1) as f64 / lambda_min)
}

/// Key-value form of a linear schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub eta: f64,
    pub gamma_clip: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_min: 1e-4,
            beta_max: 0.02,
            eta: 0.0,
            gamma_clip: DEFAULT_GAMMA_CLIP,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Schedule> {
        Schedule::linear(self.steps, self.beta_min, self.beta_max)?
            .with_eta(self.eta)?
            .with_gamma_clip(self.gamma_clip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn default_linear_schedule_is_valid() {
        let s = Schedule::linear(200, 1e-4, 0.02).unwrap();
        assert_eq!(s.steps(), 200);
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=200 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert_eq!(s.sigma(t), 0.0);
        }
        assert_eq!(s.gamma_clip(), 100_000.0);
        assert_relative_eq!(s.beta(1), 1e-4);
        assert_relative_eq!(s.beta(200), 0.02);
    }

    #[test]
    fn beta_of_one_rejected() {
        assert!(Schedule::linear(1, 1.0, 1.0).is_err());
        assert!(Schedule::linear(0, 0.1, 0.2).is_err());
        assert!(Schedule::linear(3, 0.0, 0.2).is_err());
        assert!(Schedule::linear(3, 0.3, 0.2).is_err());
    }

    #[test]
    fn two_step_hand_product() {
        let s = Schedule::linear(2, 0.1, 0.2).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_relative_eq!(s.alpha_bar(1), 0.9, epsilon = 1e-15);
        assert_relative_eq!(s.alpha_bar(2), 0.72, epsilon = 1e-15);
    }

    #[test]
    fn penalty_coefficient_values() {
        assert_relative_eq!(penalty_from_alpha_bar(0.0, 1e5), std::f64::consts::E, epsilon = 1e-15);
        assert_eq!(penalty_from_alpha_bar(0.99, 1e5), 100_000.0);
        assert_relative_eq!(penalty_from_alpha_bar(0.5, 1e5), 7.38905609893065, epsilon = 1e-12);

        let s = Schedule::from_alpha_bars(vec![1.0, 0.99, 0.5, 0.1]).unwrap();
        // t = 1 reads alpha_bar(0) = 1: the limit is the clip.
        assert_eq!(s.penalty_coefficient(1).unwrap(), 100_000.0);
        assert_eq!(s.penalty_coefficient(2).unwrap(), 100_000.0);
        assert_relative_eq!(s.penalty_coefficient(3).unwrap(), 7.38905609893065, epsilon = 1e-12);
        assert!(s.penalty_coefficient(0).is_err());
        assert!(s.penalty_coefficient(4).is_err());
    }

    #[test]
    fn repeated_alpha_bar_rejected() {
        assert!(Schedule::from_alpha_bars(vec![1.0, 0.5, 0.5]).is_err());
        assert!(Schedule::from_alpha_bars(vec![0.9, 0.5]).is_err());
        let s = Schedule::linear_alpha_bar(4).unwrap();
        assert_eq!(s.alpha_bar(4), 0.0);
        assert_eq!(s.alpha_bar(2), 0.5);
    }

    #[test]
    fn theorem2_penalty_values() {
        assert_eq!(theorem2_penalty(10, 10, 2.0, 1.0).unwrap(), 4.0);
        assert_eq!(theorem2_penalty(1, 10, 2.0, 1.0).unwrap(), 40.0);
        assert!(theorem2_penalty(1, 10, 1.0, 1.0).is_err());
        assert!(theorem2_penalty(1, 10, 2.0, 0.0).is_err());
        assert!(theorem2_penalty(11, 10, 2.0, 1.0).is_err());
    }

    #[test]
    fn eta_keeps_first_sigma_zero() {
        let s = Schedule::linear(50, 1e-4, 0.02).unwrap().with_eta(1.0).unwrap();
        assert_eq!(s.sigma(1), 0.0);
        assert!(s.sigma(2) > 0.0);
        for t in 1..=50 {
            assert!(1.0 - s.alpha_bar(t - 1) - s.sigma(t).powi(2) >= -1e-15);
        }
        assert!(Schedule::linear(5, 0.1, 0.2).unwrap().with_eta(1.5).is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ScheduleConfig {
            steps: 17,
            eta: 0.5,
            ..Default::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        let back: ScheduleConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert!(toml::from_str::<ScheduleConfig>("bogus = 1").is_err());
    }

    fn valid_alpha_bars() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.001f64..0.5, 1..60).prop_map(|betas| {
            let mut ab = vec![1.0];
            let mut acc = 1.0;
            for b in betas {
                acc *= 1.0 - b;
                ab.push(acc);
            }
            ab
        })
    }

    proptest! {
        #[test]
        fn penalty_non_increasing_in_t(ab in valid_alpha_bars()) {
            let s = Schedule::from_alpha_bars(ab).unwrap();
            for t in 2..=s.steps() {
                let hi = s.penalty_coefficient(t - 1).unwrap();
                let lo = s.penalty_coefficient(t).unwrap();
                prop_assert!(lo <= hi);
                if hi < s.gamma_clip() {
                    prop_assert!(lo < hi);
                }
            }
        }

        #[test]
        fn alpha_bar_inequality_holds(ab in valid_alpha_bars()) {
            for t in 1..ab.len() {
                let lhs = ab[t - 1].sqrt() * ab[t].sqrt();
                let rhs = 1.0 - (1.0 - ab[t - 1]).sqrt() * (1.0 - ab[t]).sqrt();
                prop_assert!(lhs < rhs, "t={} lhs={} rhs={}", t, lhs, rhs);
            }
        }

        #[test]
        fn theorem2_penalty_exceeds_two_over_lambda(k in 1.0001f64..100.0, lam in 1e-3f64..1e3, steps in 1usize..500) {
            for t in 1..=steps {
                prop_assert!(theorem2_penalty(t, steps, k, lam).unwrap() > 2.0 / lam);
            }
        }
    }
}

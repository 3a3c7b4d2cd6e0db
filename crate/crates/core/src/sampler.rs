//! DDIM sampling, constrained posterior sampling and the two comparison baselines.
//!
//! Every sampler is a pure function of the denoiser, the config and a
//! `(seed, index)` pair. The initial draw and the per-step noise come from
//! separate counter-based streams, so two samplers that make the same draws
//! at the same steps see identical noise.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::denoiser::Denoiser;
use crate::projection::{ProjectionConfig, ProjectionResult, Projector, SetProjector, WarmStart};
use crate::rng::{self, Purpose};
use crate::schedule::{theorem2_penalty, Schedule};
use crate::series::{Dataset, TimeSeries};
use crate::{CpsError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub seed: u64,
    /// DDIM stochasticity; 0 is deterministic. `sigma_1` is zero regardless.
    pub eta: f64,
    pub projection: ProjectionConfig,
    /// Guided baseline only.
    pub guidance_weight: f64,
    /// Guided baseline only: overwrite fixed-value entries after each step.
    pub enforce_fixed_values: bool,
    /// Start each projection from the previous step's output when that is better.
    pub warm_start: bool,
    /// Record per-step diagnostics.
    pub trace: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            eta: 0.0,
            projection: ProjectionConfig::default(),
            guidance_weight: 0.0,
            enforce_fixed_values: true,
            warm_start: true,
            trace: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub t: usize,
    pub gamma: f64,
    pub z0_hat: Vec<f64>,
    pub z0_pr: Vec<f64>,
    /// `Pi` at the posterior mean and after projection.
    pub violation_hat: f64,
    pub violation_pr: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Projection objective per iteration, when the projection config records it.
    pub objective_trace: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub sample: TimeSeries,
    /// `Pi(sample)` with projection thresholds; 0 without a constraint set.
    pub violation_total: f64,
    /// Per-constraint raw violation in excess of the set's budget.
    pub per_constraint: Vec<f64>,
    pub steps: usize,
    pub wall_time_secs: f64,
    /// False when any projection hit its iteration cap.
    pub converged: bool,
    pub trace: Option<Vec<StepTrace>>,
}

impl SampleReport {
    fn finish(
        sample: TimeSeries,
        set: Option<&ConstraintSet>,
        steps: usize,
        start: Instant,
        converged: bool,
        trace: Option<Vec<StepTrace>>,
    ) -> Self {
        let (violation_total, per_constraint) = match set {
            Some(s) => (s.violation(&sample), s.per_constraint_violation(&sample)),
            None => (0.0, Vec::new()),
        };
        Self {
            sample,
            violation_total,
            per_constraint,
            steps,
            wall_time_secs: start.elapsed().as_secs_f64(),
            converged,
            trace,
        }
    }

    /// No constraint exceeds its evaluation budget.
    pub fn feasible(&self) -> bool {
        self.per_constraint.iter().all(|v| *v == 0.0)
    }
}

/// Penalty coefficient rule for the projection step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GammaRule {
    /// `min(exp(1 / (1 - alpha_bar(t-1))), clip)` from the schedule.
    Exponential,
    /// `2k(T - t + 1) / lambda_min`.
    Theorem2 { k: f64, lambda_min: f64 },
}

impl GammaRule {
    pub fn gamma(&self, schedule: &Schedule, t: usize) -> Result<f64> {
        match self {
            GammaRule::Exponential => schedule.penalty_coefficient(t),
            GammaRule::Theorem2 { k, lambda_min } => theorem2_penalty(t, schedule.steps(), *k, *lambda_min),
        }
    }
}

fn sampling_schedule(d: &dyn Denoiser, cfg: &SamplerConfig) -> Result<Schedule> {
    d.schedule().clone().with_eta(cfg.eta)
}

/// `z_T ~ N(0, I)` from the initial-noise stream.
pub fn initial_noise(shape: (usize, usize), seed: u64, index: u64) -> TimeSeries {
    let mut r = rng::stream(seed, index, Purpose::InitialNoise, 0);
    TimeSeries::from_raw(shape.0, shape.1, rng::normals(&mut r, shape.0 * shape.1))
}

/// Fresh noise for step `t`, drawn only when `sigma_t > 0`.
pub fn step_noise(schedule: &Schedule, shape: (usize, usize), seed: u64, index: u64, t: usize) -> Option<TimeSeries> {
    (schedule.sigma(t) > 0.0).then(|| {
        let mut r = rng::stream(seed, index, Purpose::StepNoise, t as u64);
        TimeSeries::from_raw(shape.0, shape.1, rng::normals(&mut r, shape.0 * shape.1))
    })
}

/// `sqrt(ab_{t-1}) z0 + sqrt(1 - ab_{t-1} - sigma_t^2) eps + sigma_t noise`.
pub fn ddim_update(
    schedule: &Schedule,
    t: usize,
    z0: &TimeSeries,
    eps: &TimeSeries,
    noise: Option<&TimeSeries>,
) -> Result<TimeSeries> {
    let ab_prev = schedule.alpha_bar(t - 1);
    let sigma = schedule.sigma(t);
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut z = z0.combine(ab_prev.sqrt(), eps, dir)?;
    if let Some(n) = noise {
        z = z.combine(1.0, n, sigma)?;
    }
    if !z.is_finite() {
        return Err(CpsError::numerical(Some(t), "non-finite value in the sampling trajectory"));
    }
    Ok(z)
}

/// Unconstrained DDIM sampling.
pub fn ddim_sample(d: &dyn Denoiser, cfg: &SamplerConfig, index: u64) -> Result<SampleReport> {
    let start = Instant::now();
    let schedule = sampling_schedule(d, cfg)?;
    let shape = d.shape();
    let mut z = initial_noise(shape, cfg.seed, index);
    for t in (1..=schedule.steps()).rev() {
        let (eps, z0) = d.estimate(&z, t).map_err(|e| at_step(e, t))?;
        let noise = step_noise(&schedule, shape, cfg.seed, index, t);
        z = ddim_update(&schedule, t, &z0, &eps, noise.as_ref())?;
    }
    Ok(SampleReport::finish(z, None, schedule.steps(), start, true, None))
}

fn at_step(e: CpsError, t: usize) -> CpsError {
    match e {
        CpsError::Numerical { step: None, message } => CpsError::Numerical {
            step: Some(t),
            message,
        },
        other => other,
    }
}

/// One step of the constrained sampler.
pub struct StepOutput {
    pub z_prev: TimeSeries,
    pub eps: TimeSeries,
    pub z0_hat: TimeSeries,
    pub projection: Option<ProjectionResult>,
    pub gamma: f64,
}

/// Noise estimate, posterior mean, projection and DDIM recombination for step `t`.
#[allow(clippy::too_many_arguments)]
pub fn cps_step(
    d: &dyn Denoiser,
    schedule: &Schedule,
    projector: Option<&dyn Projector>,
    rule: GammaRule,
    z: &TimeSeries,
    t: usize,
    noise: Option<&TimeSeries>,
    warm: Option<&WarmStart>,
) -> Result<StepOutput> {
    let (eps, z0_hat) = d.estimate(z, t).map_err(|e| at_step(e, t))?;
    let (z0, projection, gamma) = match projector {
        Some(p) => {
            let gamma = rule.gamma(schedule, t)?;
            let res = p.project(&z0_hat, gamma, warm).map_err(|e| at_step(e, t))?;
            (res.z.clone(), Some(res), gamma)
        }
        None => (z0_hat.clone(), None, 0.0),
    };
    let z_prev = ddim_update(schedule, t, &z0, &eps, noise)?;
    Ok(StepOutput {
        z_prev,
        eps,
        z0_hat,
        projection,
        gamma,
    })
}

/// The constrained sampling loop with an explicit projector. `None` disables
/// projection and reproduces [`ddim_sample`] exactly. `report_set` is used only
/// to fill in the violation fields of the report.
pub fn cps_sample_with(
    d: &dyn Denoiser,
    projector: Option<&dyn Projector>,
    rule: GammaRule,
    cfg: &SamplerConfig,
    index: u64,
    report_set: Option<&ConstraintSet>,
) -> Result<SampleReport> {
    let start = Instant::now();
    let schedule = sampling_schedule(d, cfg)?;
    let shape = d.shape();
    let mut z = initial_noise(shape, cfg.seed, index);
    let mut warm: Option<WarmStart> = None;
    let mut converged = true;
    let mut trace = cfg.trace.then(Vec::new);
    for t in (1..=schedule.steps()).rev() {
        let noise = step_noise(&schedule, shape, cfg.seed, index, t);
        let out = cps_step(d, &schedule, projector, rule, &z, t, noise.as_ref(), warm.as_ref())?;
        if let (Some(res), Some(p)) = (&out.projection, projector) {
            converged &= res.converged;
            if let Some(tr) = trace.as_mut() {
                tr.push(StepTrace {
                    t,
                    gamma: out.gamma,
                    z0_hat: out.z0_hat.as_slice().to_vec(),
                    z0_pr: res.z.as_slice().to_vec(),
                    violation_hat: p.violation(&out.z0_hat),
                    violation_pr: res.residual_violation,
                    iterations: res.iterations,
                    converged: res.converged,
                    objective_trace: res.trace.clone(),
                });
            }
            if cfg.warm_start {
                warm = Some(res.warm_start());
            }
        }
        z = out.z_prev;
    }
    let final_violation = match (report_set, projector) {
        (None, Some(p)) => Some(p.violation(&z)),
        _ => None,
    };
    let mut report = SampleReport::finish(z, report_set, schedule.steps(), start, converged, trace);
    if let Some(v) = final_violation {
        report.violation_total = v;
    }
    Ok(report)
}

/// Constrained posterior sampling against `set`, with the schedule's penalty coefficients.
pub fn cps_sample(d: &dyn Denoiser, set: &ConstraintSet, cfg: &SamplerConfig, index: u64) -> Result<SampleReport> {
    let projector = cps_projector(d, set, cfg)?;
    cps_sample_with(d, Some(&projector), GammaRule::Exponential, cfg, index, Some(set))
}

/// Build the projector once for a batch of samples.
pub fn cps_projector(d: &dyn Denoiser, set: &ConstraintSet, cfg: &SamplerConfig) -> Result<SetProjector> {
    if set.is_empty() {
        return Err(CpsError::invalid(
            "constrained sampling needs at least one constraint; use DDIM sampling for unconstrained generation",
        ));
    }
    let (k, l) = d.shape();
    SetProjector::new(set.clone(), k, l, cfg.projection.clone())
}

/// Guidance baseline: after each DDIM step subtract `w * dPi/dz` evaluated at
/// the posterior mean, then overwrite fixed-value entries with their noised targets.
pub fn guided_sample(d: &dyn Denoiser, set: &ConstraintSet, cfg: &SamplerConfig, index: u64) -> Result<SampleReport> {
    let start = Instant::now();
    if !(cfg.guidance_weight >= 0.0 && cfg.guidance_weight.is_finite()) {
        return Err(CpsError::invalid("guidance weight must be finite and nonnegative"));
    }
    let schedule = sampling_schedule(d, cfg)?;
    let shape = d.shape();
    set.validate(shape.0, shape.1)?;
    let fixed = if cfg.enforce_fixed_values {
        set.fixed_values(shape.1)
    } else {
        Vec::new()
    };
    let mut z = initial_noise(shape, cfg.seed, index);
    for t in (1..=schedule.steps()).rev() {
        let (eps, z0) = d.estimate(&z, t).map_err(|e| at_step(e, t))?;
        let noise = step_noise(&schedule, shape, cfg.seed, index, t);
        z = ddim_update(&schedule, t, &z0, &eps, noise.as_ref())?;
        if cfg.guidance_weight > 0.0 {
            let g = set.subgradient(&z0)?;
            for (v, gi) in z.as_mut_slice().iter_mut().zip(&g) {
                *v -= cfg.guidance_weight * gi;
            }
        }
        if !fixed.is_empty() {
            let ab_prev = schedule.alpha_bar(t - 1);
            let sigma = schedule.sigma(t);
            let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
            let e = eps.as_slice();
            let zs = z.as_mut_slice();
            for &(i, v) in &fixed {
                zs[i] = ab_prev.sqrt() * v + dir * e[i];
            }
        }
    }
    Ok(SampleReport::finish(z, Some(set), schedule.steps(), start, true, None))
}

/// Where the COP baseline takes the point it projects.
#[derive(Clone, Copy)]
pub enum CopSeed<'a> {
    /// A uniformly chosen training sample.
    Dataset(&'a Dataset),
    /// An unconstrained DDIM sample.
    Generated(&'a dyn Denoiser),
}

/// Distance-only COP baseline: a single projection of a seed sample at a fixed,
/// large penalty coefficient.
pub fn cop_project_baseline(
    source: CopSeed<'_>,
    set: &ConstraintSet,
    gamma: f64,
    cfg: &SamplerConfig,
    index: u64,
) -> Result<SampleReport> {
    let start = Instant::now();
    let seed = match source {
        CopSeed::Dataset(ds) => {
            let mut r = rng::stream(cfg.seed, index, Purpose::Selection, 0);
            ds.samples()[r.random_range(0..ds.len())].clone()
        }
        CopSeed::Generated(d) => ddim_sample(d, cfg, index)?.sample,
    };
    let (k, l) = seed.shape();
    let projector = SetProjector::new(set.clone(), k, l, cfg.projection.clone())?;
    let res = projector.project(&seed, gamma, None)?;
    Ok(SampleReport::finish(res.z, Some(set), 1, start, res.converged, None))
}

/// Run `f` for indices `0..count` in parallel, preserving order.
pub fn batch<F>(count: usize, f: F) -> Result<Vec<SampleReport>>
where
    F: Fn(u64) -> Result<SampleReport> + Sync + Send,
{
    (0..count as u64).into_par_iter().map(f).collect()
}

/// Plot-ready per-step diagnostics.
pub fn trace_csv(trace: &[StepTrace]) -> String {
    let mut s = String::from("t,gamma,violation_hat,violation_pr,iterations,converged\n");
    for r in trace {
        s.push_str(&format!(
            "{},{:?},{:?},{:?},{},{}\n",
            r.t, r.gamma, r.violation_hat, r.violation_pr, r.iterations, r.converged
        ));
    }
    s
}

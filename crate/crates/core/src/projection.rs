//! The projection step: `argmin_z 1/2 (||z - z_hat||^2 + gamma * Pi(z))`.
//!
//! Two penalty families are supported.
//!
//! * Hinge penalties from a [`ConstraintSet`]. Sets that compile to affine rows
//!   are solved through the dual, a box-constrained QP over one multiplier per
//!   hinge, by cyclic coordinate ascent. Each sweep yields a primal candidate
//!   `z_hat - G^T lambda`; a candidate is accepted only when it lowers the primal
//!   objective, so the recorded objective trace never increases. Sets that
//!   don't compile (location-free argmax values) are handled by repeatedly
//!   linearising at the current point and backtracking on the true objective.
//! * The squared residual `||A z - b||^2` of an equality system, solved either in
//!   closed form, `[I + gamma A^T A]^{-1} (z_hat + gamma A^T b)`, or iteratively.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::constraints::{AffineSystem, ConstraintSet, HingeRow, RowKind};
use crate::series::TimeSeries;
use crate::{CpsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Fixed step `eta = 0.95 * 2 / (2 + gamma L)` with `L` the Lipschitz constant of `grad Pi`.
    FixedLipschitz,
    /// Line search. For quadratic penalties the search is exact along conjugate directions.
    Backtracking,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionConfig {
    pub max_iterations: usize,
    pub grad_tolerance: f64,
    pub step_rule: StepRule,
    pub lipschitz_estimate: Option<f64>,
    pub record_trace: bool,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            grad_tolerance: 1e-8,
            step_rule: StepRule::Backtracking,
            lipschitz_estimate: None,
            record_trace: false,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(CpsError::invalid("projection max_iterations must be at least 1"));
        }
        if !(self.grad_tolerance > 0.0) {
            return Err(CpsError::invalid("projection grad_tolerance must be positive"));
        }
        if let Some(l) = self.lipschitz_estimate {
            if !(l > 0.0) {
                return Err(CpsError::invalid("lipschitz_estimate must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ProjectionResult {
    pub z: TimeSeries,
    pub objective: f64,
    pub iterations: usize,
    /// `Pi(z)` for the projector's penalty.
    pub residual_violation: f64,
    pub converged: bool,
    /// Objective after each iteration, starting with the initial point. Empty
    /// unless the config asks for it.
    pub trace: Vec<f64>,
    /// Dual multipliers of the hinge solver, reused as a warm start.
    pub duals: Vec<f64>,
}

impl ProjectionResult {
    fn unchanged(z_hat: &TimeSeries, violation: f64, gamma: f64, record: bool) -> Self {
        let objective = 0.5 * gamma * violation;
        Self {
            z: z_hat.clone(),
            objective,
            iterations: 0,
            residual_violation: violation,
            converged: true,
            trace: if record { vec![objective] } else { Vec::new() },
            duals: Vec::new(),
        }
    }

    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            z: self.z.clone(),
            duals: self.duals.clone(),
        }
    }
}

/// Previous projection output, offered to the next call.
#[derive(Clone, Debug)]
pub struct WarmStart {
    pub z: TimeSeries,
    pub duals: Vec<f64>,
}

pub trait Projector: Send + Sync {
    fn project(&self, z_hat: &TimeSeries, gamma: f64, warm: Option<&WarmStart>) -> Result<ProjectionResult>;

    /// The penalty `Pi` this projector minimises against.
    fn violation(&self, z: &TimeSeries) -> f64;
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma >= 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(CpsError::invalid(format!("penalty coefficient {gamma} must be finite and nonnegative")))
    }
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

// ---------------------------------------------------------------------------
// Hinge penalties
// ---------------------------------------------------------------------------

/// Projection against the violation function of a constraint set.
#[derive(Clone, Debug)]
pub struct SetProjector {
    set: ConstraintSet,
    channels: usize,
    horizon: usize,
    hinges: Option<Vec<HingeRow>>,
    cfg: ProjectionConfig,
}

impl SetProjector {
    pub fn new(set: ConstraintSet, channels: usize, horizon: usize, cfg: ProjectionConfig) -> Result<Self> {
        cfg.validate()?;
        let hinges = match set.compile_affine(channels, horizon) {
            Ok(sys) => Some(sys.hinges()),
            Err(CpsError::NonAffine { index, kind, .. }) => {
                log::debug!("constraint {index} ({kind}) is not affine; projecting by local linearisation");
                None
            }
            Err(e) => return Err(e),
        };
        Ok(Self {
            set,
            channels,
            horizon,
            hinges,
            cfg,
        })
    }

    pub fn set(&self) -> &ConstraintSet {
        &self.set
    }

    pub fn config(&self) -> &ProjectionConfig {
        &self.cfg
    }

    fn objective(&self, z: &TimeSeries, z_hat: &TimeSeries, gamma: f64) -> f64 {
        0.5 * (dist_sq(z.as_slice(), z_hat.as_slice()) + gamma * self.set.violation(z))
    }

    /// Linearise at the current point, solve the local problem and backtrack
    /// on the true objective.
    fn project_nonaffine(&self, z_hat: &TimeSeries, gamma: f64, start: TimeSeries) -> Result<ProjectionResult> {
        let record = self.cfg.record_trace;
        let mut z = start;
        let mut f = self.objective(&z, z_hat, gamma);
        let mut trace = if record { vec![f] } else { Vec::new() };
        let mut converged = false;
        let mut iterations = 0;
        let mut duals = Vec::new();
        while iterations < self.cfg.max_iterations {
            iterations += 1;
            let local = self.set.local_system(&z)?.hinges();
            let inner = dual_ascent(z_hat, &local, gamma, None, &self.cfg, false)?;
            duals = inner.duals;
            let direction: Vec<f64> = inner.z.as_slice().iter().zip(z.as_slice()).map(|(c, a)| c - a).collect();
            let mut step = 1.0;
            let mut accepted = None;
            while step > 1e-12 {
                let cand: Vec<f64> = z.as_slice().iter().zip(&direction).map(|(a, d)| a + step * d).collect();
                let cand = TimeSeries::from_raw(self.channels, self.horizon, cand);
                let fc = self.objective(&cand, z_hat, gamma);
                if !fc.is_finite() {
                    return Err(CpsError::numerical(None, "projection objective is not finite"));
                }
                if fc < f {
                    accepted = Some((cand, fc));
                    break;
                }
                step *= 0.5;
            }
            match accepted {
                Some((cand, fc)) => {
                    let gain = f - fc;
                    z = cand;
                    f = fc;
                    if record {
                        trace.push(f);
                    }
                    if gain <= self.cfg.grad_tolerance * (1.0 + f.abs()) {
                        converged = true;
                        break;
                    }
                }
                None => {
                    converged = true;
                    break;
                }
            }
        }
        let violation = self.set.violation(&z);
        Ok(ProjectionResult {
            z,
            objective: f,
            iterations,
            residual_violation: violation,
            converged,
            trace,
            duals,
        })
    }
}

impl Projector for SetProjector {
    fn project(&self, z_hat: &TimeSeries, gamma: f64, warm: Option<&WarmStart>) -> Result<ProjectionResult> {
        check_gamma(gamma)?;
        z_hat.check_shape((self.channels, self.horizon))?;
        let v_hat = self.set.violation(z_hat);
        if !v_hat.is_finite() {
            return Err(CpsError::numerical(None, "violation of the posterior mean is not finite"));
        }
        if gamma == 0.0 || v_hat == 0.0 || self.set.is_empty() {
            return Ok(ProjectionResult::unchanged(z_hat, v_hat, gamma, self.cfg.record_trace));
        }
        match &self.hinges {
            Some(hinges) => {
                let mut result = dual_ascent(z_hat, hinges, gamma, warm, &self.cfg, true)?;
                result.residual_violation = self.set.violation(&result.z);
                Ok(result)
            }
            None => {
                let start = match warm {
                    Some(w) if w.z.shape() == z_hat.shape()
                        && self.objective(&w.z, z_hat, gamma) < self.objective(z_hat, z_hat, gamma) =>
                    {
                        w.z.clone()
                    }
                    _ => z_hat.clone(),
                };
                self.project_nonaffine(z_hat, gamma, start)
            }
        }
    }

    fn violation(&self, z: &TimeSeries) -> f64 {
        self.set.violation(z)
    }
}

/// Hinge penalty `sum_j max(0, g_j . z - h_j)` evaluated on a flat vector.
fn hinge_penalty(hinges: &[HingeRow], z: &[f64]) -> f64 {
    hinges.iter().map(|h| h.value(z)).sum()
}

/// Dual coordinate ascent for `1/2 ||z - z_hat||^2 + gamma/2 sum_j max(0, g_j . z - h_j)`.
///
/// With multipliers `lambda_j in [0, gamma/2]` the minimiser is `z_hat - G^T lambda`.
/// The primal iterate only moves when the candidate strictly lowers the
/// objective. Stops when the projected dual gradient falls below the tolerance.
fn dual_ascent(
    z_hat: &TimeSeries,
    hinges: &[HingeRow],
    gamma: f64,
    warm: Option<&WarmStart>,
    cfg: &ProjectionConfig,
    record: bool,
) -> Result<ProjectionResult> {
    let record = record && cfg.record_trace;
    let (k, l) = z_hat.shape();
    let zh = z_hat.as_slice();
    let n = zh.len();
    let cap = 0.5 * gamma;
    let objective = |z: &[f64]| 0.5 * (dist_sq(z, zh) + gamma * hinge_penalty(hinges, z));

    let mut lambda = vec![0.0; hinges.len()];
    let mut w = vec![0.0; n];
    if let Some(ws) = warm.filter(|ws| ws.duals.len() == hinges.len()) {
        for (j, h) in hinges.iter().enumerate() {
            let v = ws.duals[j].clamp(0.0, cap);
            lambda[j] = v;
            for (i, a) in &h.coeffs {
                w[*i] += v * a;
            }
        }
    }

    let mut z_best = zh.to_vec();
    let mut f_best = objective(&z_best);
    if let Some(ws) = warm.filter(|ws| ws.z.shape() == (k, l)) {
        let fw = objective(ws.z.as_slice());
        if fw < f_best {
            z_best = ws.z.as_slice().to_vec();
            f_best = fw;
        }
    }
    if !f_best.is_finite() {
        return Err(CpsError::numerical(None, "projection objective is not finite"));
    }
    let mut trace = if record { vec![f_best] } else { Vec::new() };

    let mut z = vec![0.0; n];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        for (j, h) in hinges.iter().enumerate() {
            if h.norm_sq == 0.0 {
                continue;
            }
            let r = h.coeffs.iter().map(|(i, a)| a * (zh[*i] - w[*i])).sum::<f64>() - h.offset;
            let next = (lambda[j] + r / h.norm_sq).clamp(0.0, cap);
            let d = next - lambda[j];
            if d != 0.0 {
                lambda[j] = next;
                for (i, a) in &h.coeffs {
                    w[*i] += d * a;
                }
            }
        }
        for i in 0..n {
            z[i] = zh[i] - w[i];
        }
        let fc = objective(&z);
        if !fc.is_finite() {
            return Err(CpsError::numerical(None, "projection objective is not finite"));
        }
        if fc < f_best {
            f_best = fc;
            z_best.copy_from_slice(&z);
        }
        if record {
            trace.push(f_best);
        }
        // projected gradient of the dual at the current multipliers
        let kkt: f64 = hinges
            .iter()
            .zip(&lambda)
            .filter(|(h, _)| h.norm_sq > 0.0)
            .map(|(h, lam)| {
                let r = h.residual(&z);
                let pg = if *lam <= 0.0 {
                    r.max(0.0)
                } else if *lam >= cap {
                    r.min(0.0)
                } else {
                    r
                };
                pg * pg
            })
            .sum::<f64>()
            .sqrt();
        if kkt <= cfg.grad_tolerance {
            converged = true;
            break;
        }
    }
    let violation = hinge_penalty(hinges, &z_best);
    Ok(ProjectionResult {
        z: TimeSeries::from_raw(k, l, z_best),
        objective: f_best,
        iterations,
        residual_violation: violation,
        converged,
        trace,
        duals: lambda,
    })
}

/// Project `z_hat` against the violation function of `set`.
pub fn project(z_hat: &TimeSeries, set: &ConstraintSet, gamma: f64, cfg: &ProjectionConfig) -> Result<ProjectionResult> {
    let (k, l) = z_hat.shape();
    SetProjector::new(set.clone(), k, l, cfg.clone())?.project(z_hat, gamma, None)
}

// ---------------------------------------------------------------------------
// Squared residual penalty
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub enum ResidualMethod {
    ClosedForm,
    Iterative(ProjectionConfig),
}

/// Projection with `Pi(z) = ||A z - b||^2` for an equality system.
#[derive(Clone, Debug)]
pub struct ResidualProjector {
    a: DMatrix<f64>,
    b: DVector<f64>,
    ata: DMatrix<f64>,
    atb: DVector<f64>,
    channels: usize,
    horizon: usize,
    method: ResidualMethod,
}

impl ResidualProjector {
    pub fn new(sys: &AffineSystem, channels: usize, horizon: usize, method: ResidualMethod) -> Result<Self> {
        if !sys.is_equality_only() {
            return Err(CpsError::invalid(
                "squared-residual projection needs an equality-only affine system",
            ));
        }
        if sys.dim() != channels * horizon {
            return Err(CpsError::invalid(format!(
                "affine system has {} columns for a {channels}x{horizon} sample",
                sys.dim()
            )));
        }
        if let ResidualMethod::Iterative(cfg) = &method {
            cfg.validate()?;
        }
        let a = sys.matrix();
        let b = sys.rhs();
        let ata = a.transpose() * &a;
        let atb = a.transpose() * &b;
        Ok(Self {
            a,
            b,
            ata,
            atb,
            channels,
            horizon,
            method,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    fn residual_sq(&self, z: &DVector<f64>) -> f64 {
        (&self.a * z - &self.b).norm_squared()
    }

    fn objective(&self, z: &DVector<f64>, z_hat: &DVector<f64>, gamma: f64) -> f64 {
        0.5 * ((z - z_hat).norm_squared() + gamma * self.residual_sq(z))
    }

    fn closed_form(&self, z_hat: &DVector<f64>, gamma: f64) -> Result<DVector<f64>> {
        let n = z_hat.len();
        let h = DMatrix::identity(n, n) + &self.ata * gamma;
        let chol = nalgebra::Cholesky::new(h)
            .ok_or_else(|| CpsError::numerical(None, "I + gamma A^T A is not numerically positive definite"))?;
        Ok(chol.solve(&(z_hat + &self.atb * gamma)))
    }

    fn iterative(&self, z_hat: &DVector<f64>, gamma: f64, start: DVector<f64>, cfg: &ProjectionConfig) -> Result<ProjectionResult> {
        let hess = |v: &DVector<f64>| v + (&self.ata * v) * gamma;
        let grad = |z: &DVector<f64>| (z - z_hat) + (&self.ata * z - &self.atb) * gamma;
        let mut z = start;
        let mut f = self.objective(&z, z_hat, gamma);
        let mut trace = if cfg.record_trace { vec![f] } else { Vec::new() };
        let mut g = grad(&z);
        // The gradient cannot be resolved below its own rounding error.
        let scale = z_hat.norm() + gamma * (self.ata.norm() * z.norm().max(z_hat.norm()) + self.atb.norm());
        let tol = cfg.grad_tolerance.max(16.0 * f64::EPSILON * scale);
        let mut converged = g.norm() <= tol;
        let mut iterations = 0;
        match cfg.step_rule {
            StepRule::Backtracking => {
                // Conjugate directions with the exact minimising step. On a
                // quadratic this is a line search that always decreases f.
                let mut p = -&g;
                while !converged && iterations < cfg.max_iterations {
                    iterations += 1;
                    let hp = hess(&p);
                    let curv = p.dot(&hp);
                    if !(curv > 0.0) {
                        break;
                    }
                    let alpha = -g.dot(&p) / curv;
                    let cand = &z + &p * alpha;
                    let fc = self.objective(&cand, z_hat, gamma);
                    if !fc.is_finite() {
                        return Err(CpsError::numerical(None, "projection objective is not finite"));
                    }
                    if fc > f {
                        // rounding at convergence; restart along the gradient
                        if p == -&g {
                            break;
                        }
                        p = -&g;
                        continue;
                    }
                    let g_next = &g + &hp * alpha;
                    let beta = g_next.norm_squared() / g.norm_squared();
                    z = cand;
                    f = fc;
                    g = g_next;
                    if cfg.record_trace {
                        trace.push(f);
                    }
                    converged = g.norm() <= tol;
                    p = -&g + &p * beta;
                    // periodic restart keeps directions conjugate in finite precision
                    if iterations % z.len().max(1) == 0 {
                        g = grad(&z);
                        p = -&g;
                    }
                }
            }
            StepRule::FixedLipschitz => {
                let lip = match cfg.lipschitz_estimate {
                    Some(l) => l,
                    None => 2.0 * crate::analysis::spectral_norm_symmetric(&self.ata),
                };
                let eta = 0.95 * 2.0 / (2.0 + gamma * lip);
                while !converged && iterations < cfg.max_iterations {
                    iterations += 1;
                    let cand = &z - &g * eta;
                    let fc = self.objective(&cand, z_hat, gamma);
                    if !fc.is_finite() {
                        return Err(CpsError::numerical(None, "projection objective is not finite"));
                    }
                    if fc > f {
                        // the supplied Lipschitz estimate is too small
                        break;
                    }
                    z = cand;
                    f = fc;
                    g = grad(&z);
                    if cfg.record_trace {
                        trace.push(f);
                    }
                    converged = g.norm() <= tol;
                }
            }
        }
        let violation = self.residual_sq(&z);
        Ok(ProjectionResult {
            z: TimeSeries::from_raw(self.channels, self.horizon, z.as_slice().to_vec()),
            objective: f,
            iterations,
            residual_violation: violation,
            converged,
            trace,
            duals: Vec::new(),
        })
    }
}

impl Projector for ResidualProjector {
    fn project(&self, z_hat: &TimeSeries, gamma: f64, warm: Option<&WarmStart>) -> Result<ProjectionResult> {
        check_gamma(gamma)?;
        z_hat.check_shape((self.channels, self.horizon))?;
        let zh = DVector::from_column_slice(z_hat.as_slice());
        let v_hat = self.residual_sq(&zh);
        if gamma == 0.0 || v_hat == 0.0 {
            let record = matches!(&self.method, ResidualMethod::Iterative(c) if c.record_trace);
            return Ok(ProjectionResult::unchanged(z_hat, v_hat, gamma, record));
        }
        match &self.method {
            ResidualMethod::ClosedForm => {
                let z = self.closed_form(&zh, gamma)?;
                let objective = self.objective(&z, &zh, gamma);
                if !objective.is_finite() {
                    return Err(CpsError::numerical(None, "projection objective is not finite"));
                }
                Ok(ProjectionResult {
                    residual_violation: self.residual_sq(&z),
                    z: TimeSeries::from_raw(self.channels, self.horizon, z.as_slice().to_vec()),
                    objective,
                    iterations: 1,
                    converged: true,
                    trace: Vec::new(),
                    duals: Vec::new(),
                })
            }
            ResidualMethod::Iterative(cfg) => {
                let mut start = zh.clone();
                if let Some(w) = warm.filter(|w| w.z.shape() == z_hat.shape()) {
                    let wz = DVector::from_column_slice(w.z.as_slice());
                    if self.objective(&wz, &zh, gamma) < self.objective(&zh, &zh, gamma) {
                        start = wz;
                    }
                }
                self.iterative(&zh, gamma, start, cfg)
            }
        }
    }

    fn violation(&self, z: &TimeSeries) -> f64 {
        self.residual_sq(&DVector::from_column_slice(z.as_slice()))
    }
}

/// `[I + gamma A^T A]^{-1} (z_hat + gamma A^T b)` by Cholesky factorisation.
/// Row thresholds are ignored.
pub fn closed_form_affine_eq(z_hat: &TimeSeries, sys: &AffineSystem, gamma: f64) -> Result<TimeSeries> {
    check_gamma(gamma)?;
    if sys.rows().iter().any(|r| r.kind != RowKind::Equality) {
        return Err(CpsError::invalid("closed-form projection needs equality rows only"));
    }
    let (k, l) = z_hat.shape();
    if gamma == 0.0 {
        return Ok(z_hat.clone());
    }
    ResidualProjector::new(sys, k, l, ResidualMethod::ClosedForm)?
        .project(z_hat, gamma, None)
        .map(|r| r.z)
}

/// Iterative minimisation of `1/2 (||z - z_hat||^2 + gamma ||A z - b||^2)`.
pub fn project_squared_residual(
    z_hat: &TimeSeries,
    sys: &AffineSystem,
    gamma: f64,
    cfg: &ProjectionConfig,
) -> Result<ProjectionResult> {
    let (k, l) = z_hat.shape();
    ResidualProjector::new(sys, k, l, ResidualMethod::Iterative(cfg.clone()))?.project(z_hat, gamma, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{Constraint, ConstraintKind, Trend};
    use crate::rng::{self, Purpose};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn traced() -> ProjectionConfig {
        ProjectionConfig {
            record_trace: true,
            ..Default::default()
        }
    }

    fn is_monotone(trace: &[f64]) -> bool {
        trace.windows(2).all(|w| w[1] <= w[0])
    }

    fn mean_zero(threshold: f64) -> ConstraintSet {
        ConstraintSet::new(vec![
            Constraint::new(0, ConstraintKind::Mean { target: 0.0 }).with_threshold(threshold)
        ])
    }

    #[test]
    fn zero_gamma_is_identity() {
        let z = TimeSeries::univariate(vec![2.0, 2.0]).unwrap();
        let r = project(&z, &mean_zero(0.0), 0.0, &traced()).unwrap();
        assert_eq!(r.z, z);
        assert!(r.iterations <= 1);
    }

    #[test]
    fn feasible_point_is_identity() {
        let z = TimeSeries::univariate(vec![1.0, -1.0]).unwrap();
        let r = project(&z, &mean_zero(0.0), 1e5, &traced()).unwrap();
        assert_eq!(r.z, z);
        assert_eq!(r.residual_violation, 0.0);
    }

    #[test]
    fn large_gamma_mean_projection_matches_grid_search() {
        let z_hat = TimeSeries::univariate(vec![2.0, 2.0]).unwrap();
        let set = mean_zero(0.0);
        let gamma = 1e6;
        let r = project(&z_hat, &set, gamma, &traced()).unwrap();
        assert!(r.converged);
        assert!(is_monotone(&r.trace));

        // dense grid over [-3, 3]^2, refined once around the coarse optimum
        let f = |a: f64, b: f64| {
            0.5 * ((a - 2.0).powi(2) + (b - 2.0).powi(2) + gamma * (0.5 * (a + b)).abs())
        };
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=600 {
            for j in 0..=600 {
                let (a, b) = (-3.0 + 0.01 * i as f64, -3.0 + 0.01 * j as f64);
                let v = f(a, b);
                if v < best.0 {
                    best = (v, a, b);
                }
            }
        }
        let (_, ca, cb) = best;
        for i in -100..=100 {
            for j in -100..=100 {
                let (a, b) = (ca + 1e-3 * i as f64, cb + 1e-3 * j as f64);
                let v = f(a, b);
                if v < best.0 {
                    best = (v, a, b);
                }
            }
        }
        assert!((r.z.get(0, 0) - best.1).abs() <= 2e-3);
        assert!((r.z.get(0, 1) - best.2).abs() <= 2e-3);
        assert!(r.z.get(0, 0).abs() < 1e-9 && r.z.get(0, 1).abs() < 1e-9);
    }

    #[test]
    fn small_gamma_soft_threshold() {
        // 1/2 (z - 3)^2 + gamma/2 max(0, z - 1): minimiser is 3 - gamma/2 while above 1
        let set = ConstraintSet::new(vec![Constraint::new(
            0,
            ConstraintKind::AffineInequality {
                coefficients: vec![1.0],
                bound: 1.0,
            },
        )]);
        let z_hat = TimeSeries::univariate(vec![3.0]).unwrap();
        let r = project(&z_hat, &set, 1.0, &traced()).unwrap();
        assert_relative_eq!(r.z.get(0, 0), 2.5, epsilon = 1e-12);
        let r = project(&z_hat, &set, 10.0, &traced()).unwrap();
        assert_relative_eq!(r.z.get(0, 0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn closed_form_identity_system() {
        let sys = AffineSystem::equalities(&DMatrix::identity(3, 3), &[0.0; 3]).unwrap();
        let z_hat = TimeSeries::univariate(vec![1.0, -2.0, 4.0]).unwrap();
        let z = closed_form_affine_eq(&z_hat, &sys, 1.0).unwrap();
        for (a, b) in z.as_slice().iter().zip([0.5, -1.0, 2.0]) {
            assert_relative_eq!(*a, b, epsilon = 1e-14);
        }
        assert_eq!(closed_form_affine_eq(&z_hat, &sys, 0.0).unwrap(), z_hat);
    }

    #[test]
    fn closed_form_large_gamma_hits_target() {
        let y = [0.3, -1.7, 2.2];
        let sys = AffineSystem::equalities(&DMatrix::identity(3, 3), &y).unwrap();
        let z_hat = TimeSeries::univariate(vec![5.0, 5.0, 5.0]).unwrap();
        let z = closed_form_affine_eq(&z_hat, &sys, 1e12).unwrap();
        for (a, b) in z.as_slice().iter().zip(&y) {
            assert!((a - b).abs() <= 1e-6 * b.abs());
        }
    }

    #[test]
    fn closed_form_rejects_inequalities() {
        let set = ConstraintSet::new(vec![Constraint::new(0, ConstraintKind::ArgmaxLocation { location: 0 })]);
        let sys = set.compile_affine(1, 3).unwrap();
        let z = TimeSeries::zeros(1, 3);
        assert!(closed_form_affine_eq(&z, &sys, 1.0).is_err());
    }

    fn random_equality(seed: u64) -> (AffineSystem, TimeSeries, f64) {
        let mut r = rng::stream(seed, 0, Purpose::Instance, 9);
        let n = r.random_range(1..=8);
        let m = r.random_range(1..=16);
        let a = DMatrix::from_vec(m, n, rng::normals(&mut r, m * n));
        let b = rng::normals(&mut r, m);
        let z = TimeSeries::univariate(rng::normals(&mut r, n)).unwrap();
        let gamma = 10f64.powf(r.random_range(-2.0..3.0));
        (AffineSystem::equalities(&a, &b).unwrap(), z, gamma)
    }

    #[test]
    fn iterative_matches_closed_form() {
        for seed in 0..200 {
            let (sys, z_hat, gamma) = random_equality(seed);
            let exact = closed_form_affine_eq(&z_hat, &sys, gamma).unwrap();
            let it = project_squared_residual(&z_hat, &sys, gamma, &traced()).unwrap();
            let err = it.z.distance(&exact);
            assert!(err <= 1e-6 * (1.0 + exact.norm()), "seed {seed}: {err}");
            assert!(is_monotone(&it.trace), "seed {seed}");
        }
    }

    #[test]
    fn fixed_step_descends() {
        let cfg = ProjectionConfig {
            step_rule: StepRule::FixedLipschitz,
            max_iterations: 20_000,
            record_trace: true,
            ..Default::default()
        };
        for seed in 0..20 {
            let (sys, z_hat, gamma) = random_equality(seed);
            let exact = closed_form_affine_eq(&z_hat, &sys, gamma.min(1.0)).unwrap();
            let it = project_squared_residual(&z_hat, &sys, gamma.min(1.0), &cfg).unwrap();
            assert!(is_monotone(&it.trace));
            if it.converged {
                assert!(it.z.distance(&exact) <= 1e-6 * (1.0 + exact.norm()));
            }
        }
    }

    #[test]
    fn hinge_projection_reaches_feasibility() {
        let l = 96;
        let x = crate::series::sinusoid(l, 0.8, 2.0, 0.3);
        let set = crate::constraints::extract(&x, &crate::constraints::waveform_features(10), 0.005).unwrap();
        let z_hat = TimeSeries::univariate(rng::normals(&mut rng::stream(4, 0, Purpose::Selection, 0), l)).unwrap();
        let r = project(&z_hat, &set, 1e5, &traced()).unwrap();
        assert!(r.converged);
        assert!(is_monotone(&r.trace));
        assert!(r.residual_violation <= 1e-6, "{}", r.residual_violation);
        assert!(set.per_constraint_violation(&r.z).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn warm_start_never_hurts() {
        let l = 12;
        let set = ConstraintSet::new(vec![
            Constraint::new(0, ConstraintKind::Mean { target: 0.2 }),
            Constraint::new(
                0,
                ConstraintKind::TrendSegment {
                    start: 2,
                    end: 8,
                    direction: Trend::Up,
                },
            ),
        ]);
        let p = SetProjector::new(set, 1, l, traced()).unwrap();
        let z1 = TimeSeries::univariate(rng::normals(&mut rng::stream(1, 0, Purpose::Selection, 0), l)).unwrap();
        let z2 = TimeSeries::univariate(rng::normals(&mut rng::stream(2, 0, Purpose::Selection, 0), l)).unwrap();
        let first = p.project(&z1, 50.0, None).unwrap();
        let cold = p.project(&z2, 60.0, None).unwrap();
        let warm = p.project(&z2, 60.0, Some(&first.warm_start())).unwrap();
        assert!(is_monotone(&warm.trace));
        // Both stop at the same dual tolerance; hinge kinks leave a gap of order gamma * tol.
        let slack = 60.0 * warm.duals.len() as f64 * 1e-8;
        assert!((warm.objective - cold.objective).abs() <= slack, "{} vs {}", warm.objective, cold.objective);
    }

    #[test]
    fn nonaffine_set_descends() {
        let set = ConstraintSet::new(vec![Constraint::new(
            0,
            ConstraintKind::ValueAtArgmax {
                value: 1.0,
                location: None,
            },
        )]);
        let z_hat = TimeSeries::univariate(vec![0.0, 0.4, 2.0, 0.1, 1.9]).unwrap();
        let r = project(&z_hat, &set, 1e3, &traced()).unwrap();
        assert!(is_monotone(&r.trace));
        assert!(r.objective < 0.5 * 1e3 * set.violation(&z_hat));
        assert!(r.residual_violation <= 1e-6, "{}", r.residual_violation);
    }

    #[test]
    fn bad_gamma_rejected() {
        let z = TimeSeries::univariate(vec![1.0]).unwrap();
        assert!(project(&z, &mean_zero(0.0), -1.0, &ProjectionConfig::default()).is_err());
        assert!(project(&z, &mean_zero(0.0), f64::NAN, &ProjectionConfig::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn objective_never_exceeds_start(seed in 0u64..10_000) {
            let mut r = rng::stream(seed, 0, Purpose::Selection, 5);
            let l = 8;
            let n = r.random_range(1..4);
            let cs: Vec<Constraint> = (0..n).map(|_| {
                let coefficients: Vec<f64> = rng::normals(&mut r, l);
                if r.random_bool(0.5) {
                    Constraint::new(0, ConstraintKind::AffineInequality { coefficients, bound: r.random_range(-1.0..1.0) })
                } else {
                    Constraint::new(0, ConstraintKind::AffineEquality { coefficients, target: r.random_range(-1.0..1.0) })
                }
            }).collect();
            let set = ConstraintSet::new(cs);
            let z_hat = TimeSeries::univariate(rng::normals(&mut r, l)).unwrap();
            let gamma = 10f64.powf(r.random_range(-1.0..5.0));
            let res = project(&z_hat, &set, gamma, &traced()).unwrap();
            prop_assert!(res.objective <= 0.5 * gamma * set.violation(&z_hat) + 1e-12);
            prop_assert!(is_monotone(&res.trace));
            prop_assert!((res.residual_violation - set.violation(&res.z)).abs() <= 1e-12);
        }

        #[test]
        fn equality_projection_is_non_expansive(seed in 0u64..10_000) {
            let mut r = rng::stream(seed, 0, Purpose::Selection, 6);
            let n = r.random_range(2..7);
            let m = r.random_range(1..n);
            let a = DMatrix::from_vec(m, n, rng::normals(&mut r, m * n));
            let sys = AffineSystem::equalities(&a, &rng::normals(&mut r, m)).unwrap();
            let u = TimeSeries::univariate(rng::normals(&mut r, n)).unwrap();
            let v = TimeSeries::univariate(rng::normals(&mut r, n)).unwrap();
            let pu = closed_form_affine_eq(&u, &sys, 1e8).unwrap();
            let pv = closed_form_affine_eq(&v, &sys, 1e8).unwrap();
            prop_assert!(pu.distance(&pv) <= u.distance(&v) * (1.0 + 1e-9));
        }
    }
}

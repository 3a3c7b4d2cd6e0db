//! Numerical checks of the convergence bound in the Gaussian/linear setting.
//!
//! Data is `N(mu, I)` and the constraint set is `{z : A z = y}` with `A` of full
//! column rank, so the feasible set is a single point `x*`. With the
//! squared-residual projection and `gamma(t) = 2k(T - t + 1) / lambda_min(A^T A)`
//! the sampler output should satisfy
//! `||x_gen - x*|| <= sqrt(ab_1) / k * (||x*|| + ||mu||)`.
//!
//! One deterministic step is affine in `z_t`:
//! `z_{t-1} = K_t z_t + E_t mu - F_t mu + gamma sqrt(ab_{t-1}) M A^T A x*`
//! with `M = [I + gamma A^T A]^{-1}` and
//!
//! - `K_t = sqrt(ab_{t-1} ab_t) M + sqrt((1 - ab_{t-1})(1 - ab_t)) I`
//! - `E_t = (1 - ab_t) sqrt(ab_{t-1}) M`
//! - `F_t = sqrt((1 - ab_{t-1})(1 - ab_t) ab_t) I`
//! - `D_t = gamma sqrt(ab_{t-1}) M A^T A - I`

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::AffineSystem;
use crate::denoiser::GaussianDenoiser;
use crate::projection::{ResidualMethod, ResidualProjector};
use crate::rng::{self, Purpose};
use crate::sampler::{cps_sample_with, GammaRule, SamplerConfig};
use crate::schedule::Schedule;
use crate::series::TimeSeries;
use crate::{CpsError, Result};

#[derive(Clone, Debug)]
pub struct GaussianLinearInstance {
    a: DMatrix<f64>,
    y: DVector<f64>,
    mu: DVector<f64>,
    x_star: DVector<f64>,
    lambda_min: f64,
    lambda_max: f64,
}

impl GaussianLinearInstance {
    /// Validates `m >= n`, full column rank and consistency of `y`.
    pub fn new(a: DMatrix<f64>, y: DVector<f64>, mu: DVector<f64>) -> Result<Self> {
        let (m, n) = a.shape();
        if n == 0 || m < n {
            return Err(CpsError::RankDeficient(format!("need m >= n >= 1, got {m}x{n}")));
        }
        if y.len() != m || mu.len() != n {
            return Err(CpsError::invalid("y must have m entries and mu n entries"));
        }
        let svd = a.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smin > 1e-8 * smax) {
            return Err(CpsError::RankDeficient(format!(
                "smallest singular value {smin:e} vs largest {smax:e}"
            )));
        }
        let x_star = svd
            .solve(&y, 0.0)
            .map_err(|e| CpsError::numerical(None, format!("least squares failed: {e}")))?;
        let resid = (&a * &x_star - &y).norm();
        if resid > 1e-9 * (1.0 + y.norm()) {
            return Err(CpsError::invalid(format!(
                "y is not in the range of A (least-squares residual {resid:e}); the constraint set is empty"
            )));
        }
        let eig = SymmetricEigen::new(a.transpose() * &a);
        Ok(Self {
            lambda_min: eig.eigenvalues.min(),
            lambda_max: eig.eigenvalues.max(),
            a,
            y,
            mu,
            x_star,
        })
    }

    /// Gaussian `A` (`m x n`), `y = A x_target` for a Gaussian `x_target`, Gaussian `mu`.
    pub fn random(n: usize, m: usize, seed: u64, index: u64) -> Result<Self> {
        let mut r = rng::stream(seed, index, Purpose::Instance, 0);
        let a = DMatrix::from_vec(m, n, rng::normals(&mut r, m * n));
        let x_target = DVector::from_vec(rng::normals(&mut r, n));
        let mu = DVector::from_vec(rng::normals(&mut r, n));
        let y = &a * x_target;
        Self::new(a, y, mu)
    }

    pub fn n(&self) -> usize {
        self.a.ncols()
    }

    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn x_star(&self) -> &DVector<f64> {
        &self.x_star
    }

    /// Smallest eigenvalue of `A^T A`.
    pub fn lambda_min(&self) -> f64 {
        self.lambda_min
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn system(&self) -> Result<AffineSystem> {
        AffineSystem::equalities(&self.a, self.y.as_slice())
    }

    fn mu_series(&self) -> TimeSeries {
        TimeSeries::from_raw(1, self.n(), self.mu.as_slice().to_vec())
    }
}

/// The unique feasible point, `(A^T A)^{-1} A^T y`, by an SVD least-squares solve.
pub fn solve_x_star(inst: &GaussianLinearInstance) -> DVector<f64> {
    inst.x_star.clone()
}

// ---------------------------------------------------------------------------
// Spectral norms
// ---------------------------------------------------------------------------

const POWER_MAX_ITERS: usize = 20_000;

fn power_iteration(apply: impl Fn(&DVector<f64>) -> DVector<f64>, start: &DVector<f64>) -> (f64, DVector<f64>) {
    let mut v = start.normalize();
    let mut est = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let w = apply(&v);
        let norm = w.norm();
        if norm == 0.0 {
            return (0.0, v);
        }
        let next = w / norm;
        let converged = (norm - est).abs() <= 1e-15 * norm;
        est = norm;
        v = next;
        if converged {
            break;
        }
    }
    (est, v)
}

fn default_start(n: usize) -> DVector<f64> {
    // Irregular positive entries so no eigenvector is orthogonal to the start in practice.
    DVector::from_fn(n, |i, _| 1.0 + ((i + 1) as f64 * 0.618_033_988_749_895).fract())
}

/// Largest singular value by power iteration on `M^T M`.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    let mtm = m.transpose() * m;
    power_iteration(|v| &mtm * v, &default_start(m.ncols())).0.sqrt()
}

/// Largest absolute eigenvalue of a symmetric matrix by power iteration.
pub fn spectral_norm_symmetric(m: &DMatrix<f64>) -> f64 {
    spectral_norm_symmetric_from(m, &default_start(m.ncols())).0
}

fn spectral_norm_symmetric_from(m: &DMatrix<f64>, start: &DVector<f64>) -> (f64, DVector<f64>) {
    // Iterating with M^2 avoids sign oscillation between +lambda and -lambda.
    let m2 = m * m;
    let (est, v) = power_iteration(|v| &m2 * v, start);
    (est.sqrt(), v)
}

// ---------------------------------------------------------------------------
// Step matrices
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct StepMatrices {
    pub m: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

pub fn step_matrices(inst: &GaussianLinearInstance, schedule: &Schedule, t: usize, gamma: f64) -> Result<StepMatrices> {
    schedule.check_step(t)?;
    let n = inst.n();
    let ata = inst.a.transpose() * &inst.a;
    let eye = DMatrix::<f64>::identity(n, n);
    let h = &eye + &ata * gamma;
    let m = nalgebra::Cholesky::new(h)
        .ok_or_else(|| CpsError::numerical(Some(t), "I + gamma A^T A is not positive definite"))?
        .inverse();
    let (ab, abp) = (schedule.alpha_bar(t), schedule.alpha_bar(t - 1));
    let c = ((1.0 - abp) * (1.0 - ab)).sqrt();
    let k = &m * (abp * ab).sqrt() + &eye * c;
    let e = &m * ((1.0 - ab) * abp.sqrt());
    let f = &eye * (c * ab.sqrt());
    let d = &m * &ata * (gamma * abp.sqrt()) - &eye;
    Ok(StepMatrices { m, k, e, f, d })
}

/// `K z + E mu - F mu + gamma sqrt(ab_{t-1}) M A^T A x*`.
pub fn recursion_step(
    inst: &GaussianLinearInstance,
    schedule: &Schedule,
    t: usize,
    gamma: f64,
    z: &DVector<f64>,
) -> Result<DVector<f64>> {
    let sm = step_matrices(inst, schedule, t, gamma)?;
    let ata = inst.a.transpose() * &inst.a;
    let abp = schedule.alpha_bar(t - 1);
    Ok(&sm.k * z + &sm.e * &inst.mu - &sm.f * &inst.mu + &sm.m * (&ata * &inst.x_star) * (gamma * abp.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepNorms {
    pub t: usize,
    pub gamma: f64,
    pub k: f64,
    pub e: f64,
    pub f: f64,
    pub d: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub steps: Vec<StepNorms>,
    /// `max_t ||K_t||`.
    pub lambda_k: f64,
    /// Smallest `1 - norm` over every asserted strict inequality.
    pub min_margin: f64,
    pub failures: Vec<String>,
}

impl NormReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Spectral norms of `K_t, E_t, F_t, D_t` for every step, with the norm assertions.
pub fn norm_checks(inst: &GaussianLinearInstance, schedule: &Schedule, rule: GammaRule) -> Result<NormReport> {
    let n = inst.n();
    let mut steps = Vec::with_capacity(schedule.steps());
    let mut failures = Vec::new();
    let mut min_margin = f64::INFINITY;
    let mut starts = [default_start(n), default_start(n), default_start(n)];
    let d_threshold = 2.0 / inst.lambda_min;
    for t in 1..=schedule.steps() {
        let gamma = rule.gamma(schedule, t)?;
        let sm = step_matrices(inst, schedule, t, gamma)?;
        let mut norm_of = |mat: &DMatrix<f64>, slot: usize| {
            let (v, vec) = spectral_norm_symmetric_from(mat, &starts[slot]);
            starts[slot] = vec;
            v
        };
        let k = norm_of(&sm.k, 0);
        let e = norm_of(&sm.e, 1);
        let d = norm_of(&sm.d, 2);
        // F_t is a multiple of the identity
        let f = spectral_norm_symmetric(&sm.f);
        if !(k.is_finite() && e.is_finite() && f.is_finite() && d.is_finite()) {
            return Err(CpsError::numerical(Some(t), "non-finite spectral norm"));
        }
        let mut check = |name: &str, v: f64| {
            min_margin = min_margin.min(1.0 - v);
            if !(v < 1.0) {
                failures.push(format!("t={t}: ||{name}|| = {v} is not below 1"));
            }
        };
        if gamma > 0.0 {
            check("K", k);
            check("E", e);
            check("F", f);
        }
        if gamma > d_threshold {
            check("D", d);
        }
        let (ab, abp) = (schedule.alpha_bar(t), schedule.alpha_bar(t - 1));
        let lhs = (abp * ab).sqrt();
        let rhs = 1.0 - ((1.0 - abp) * (1.0 - ab)).sqrt();
        if !(lhs < rhs) {
            failures.push(format!("t={t}: alpha_bar inequality fails ({lhs} >= {rhs})"));
        }
        if t == 1 {
            if f != 0.0 {
                failures.push(format!("||F_1|| = {f}, expected exactly 0"));
            }
            let bound = ab.sqrt() / (1.0 + gamma * inst.lambda_min);
            // power iteration is accurate to roughly 1e-12 here
            if k > bound * (1.0 + 1e-9) {
                failures.push(format!("||K_1|| = {k} exceeds {bound}"));
            }
        }
        steps.push(StepNorms { t, gamma, k, e, f, d });
    }
    let lambda_k = steps.iter().map(|s| s.k).fold(0.0, f64::max);
    Ok(NormReport {
        steps,
        lambda_k,
        min_margin,
        failures,
    })
}

// ---------------------------------------------------------------------------
// Bound verification
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub id: usize,
    pub n: usize,
    pub m: usize,
    pub k: f64,
    pub steps: usize,
    pub measured: f64,
    pub bound: f64,
    pub margin: f64,
}

impl TheoremReport {
    pub fn passed(&self) -> bool {
        self.measured <= self.bound
    }
}

/// Run the sampler with the Gaussian denoiser, closed-form projection and the
/// bound's penalty rule on the `1 - t/T` schedule, and compare with the bound.
pub fn verify_theorem2(inst: &GaussianLinearInstance, steps: usize, k: f64, id: usize) -> Result<TheoremReport> {
    if !(k > 1.0) {
        return Err(CpsError::invalid(format!("the bound needs k > 1, got {k}")));
    }
    let schedule = Schedule::linear_alpha_bar(steps)?;
    let n = inst.n();
    let d = GaussianDenoiser::new(inst.mu_series(), schedule.clone());
    let projector = ResidualProjector::new(&inst.system()?, 1, n, ResidualMethod::ClosedForm)?;
    let rule = GammaRule::Theorem2 {
        k,
        lambda_min: inst.lambda_min,
    };
    let cfg = SamplerConfig {
        seed: id as u64,
        ..Default::default()
    };
    let report = cps_sample_with(&d, Some(&projector), rule, &cfg, 0, None)?;
    let x_gen = DVector::from_column_slice(report.sample.as_slice());
    let measured = (x_gen - &inst.x_star).norm();
    let bound = schedule.alpha_bar(1).sqrt() / k * (inst.x_star.norm() + inst.mu.norm());
    Ok(TheoremReport {
        id,
        n,
        m: inst.m(),
        k,
        steps,
        measured,
        bound,
        margin: bound - measured,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub instances: usize,
    pub steps: usize,
    pub ks: Vec<f64>,
    pub max_n: usize,
    pub max_m: usize,
    pub seed: u64,
    /// Also run the step-matrix norm checks on every instance (with the smallest k).
    pub norm_checks: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            steps: 2000,
            ks: vec![2.0, 10.0, 100.0],
            max_n: 8,
            max_m: 16,
            seed: 0,
            norm_checks: true,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 || self.steps == 0 || self.ks.is_empty() {
            return Err(CpsError::invalid("sweep needs instances, steps and at least one k"));
        }
        if self.max_n == 0 || self.max_m < self.max_n {
            return Err(CpsError::invalid("sweep needs 1 <= max_n <= max_m"));
        }
        if let Some(k) = self.ks.iter().find(|k| !(**k > 1.0)) {
            return Err(CpsError::invalid(format!("the bound needs k > 1, got {k}")));
        }
        Ok(())
    }

    /// Instance `id`: `n ~ U{1..max_n}`, `m ~ U{n..max_m}`.
    pub fn instance(&self, id: usize) -> Result<GaussianLinearInstance> {
        let mut r = rng::stream(self.seed, id as u64, Purpose::Instance, 1);
        let n = r.random_range(1..=self.max_n);
        let m = r.random_range(n..=self.max_m);
        GaussianLinearInstance::random(n, m, self.seed, id as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<TheoremReport>,
    /// `(k, median measured error)` in the order of the config.
    pub medians: Vec<(f64, f64)>,
    pub norm_failures: Vec<String>,
    pub min_norm_margin: f64,
}

impl SweepReport {
    pub fn bound_failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.passed()).count()
    }

    /// Median error does not increase as k grows.
    pub fn medians_non_increasing(&self) -> bool {
        let mut sorted = self.medians.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        sorted.windows(2).all(|w| w[1].1 <= w[0].1)
    }

    pub fn passed(&self) -> bool {
        self.bound_failures() == 0 && self.medians_non_increasing() && self.norm_failures.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,n,m,k,T,measured,bound,margin\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{:?},{},{:?},{:?},{:?}\n",
                r.id, r.n, r.m, r.k, r.steps, r.measured, r.bound, r.margin
            ));
        }
        s
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Bound checks for every (instance, k) pair, plus optional norm checks, in parallel.
pub fn sweep(cfg: &SweepConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let per_instance: Vec<(Vec<TheoremReport>, Option<NormReport>)> = (0..cfg.instances)
        .into_par_iter()
        .map(|id| {
            let inst = cfg.instance(id)?;
            let rows = cfg
                .ks
                .iter()
                .map(|&k| verify_theorem2(&inst, cfg.steps, k, id))
                .collect::<Result<Vec<_>>>()?;
            let norms = if cfg.norm_checks {
                let schedule = Schedule::linear_alpha_bar(cfg.steps)?;
                let k = cfg.ks.iter().copied().fold(f64::INFINITY, f64::min);
                let rule = GammaRule::Theorem2 {
                    k,
                    lambda_min: inst.lambda_min(),
                };
                Some(norm_checks(&inst, &schedule, rule)?)
            } else {
                None
            };
            Ok((rows, norms))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut norm_failures = Vec::new();
    let mut min_norm_margin = f64::INFINITY;
    for (id, (r, norms)) in per_instance.into_iter().enumerate() {
        rows.extend(r);
        if let Some(nr) = norms {
            min_norm_margin = min_norm_margin.min(nr.min_margin);
            norm_failures.extend(nr.failures.into_iter().map(|f| format!("instance {id}: {f}")));
        }
    }
    let medians = cfg
        .ks
        .iter()
        .map(|&k| {
            let mut v: Vec<f64> = rows.iter().filter(|r| r.k == k).map(|r| r.measured).collect();
            (k, median(&mut v))
        })
        .collect();
    Ok(SweepReport {
        rows,
        medians,
        norm_failures,
        min_norm_margin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::Denoiser;
    use crate::sampler::cps_step;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn identity_system_star_is_y() {
        let y = DVector::from_vec(vec![0.5, -2.0, 1.5]);
        let inst = GaussianLinearInstance::new(DMatrix::identity(3, 3), y.clone(), DVector::zeros(3)).unwrap();
        assert!((solve_x_star(&inst) - y).norm() < 1e-14);
    }

    #[test]
    fn two_by_one_normal_equations() {
        let a = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let inst = GaussianLinearInstance::new(a, DVector::from_vec(vec![3.0, 6.0]), DVector::zeros(1)).unwrap();
        assert_relative_eq!(solve_x_star(&inst)[0], 3.0, epsilon = 1e-14);
        assert_relative_eq!(inst.lambda_min(), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn inconsistent_and_deficient_rejected() {
        let a = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        assert!(GaussianLinearInstance::new(a, DVector::from_vec(vec![3.0, 5.0]), DVector::zeros(1)).is_err());
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(matches!(
            GaussianLinearInstance::new(a, DVector::zeros(3), DVector::zeros(2)),
            Err(CpsError::RankDeficient(_))
        ));
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        assert!(GaussianLinearInstance::new(a, DVector::zeros(1), DVector::zeros(2)).is_err());
    }

    #[test]
    fn power_iteration_matches_eigendecomposition() {
        for seed in 0..50 {
            let mut r = rng::stream(seed, 0, Purpose::Selection, 7);
            let n = r.random_range(1..=6);
            let b = DMatrix::from_vec(n, n, rng::normals(&mut r, n * n));
            let sym = &b + b.transpose();
            let exact = SymmetricEigen::new(sym.clone()).eigenvalues.amax();
            assert!((spectral_norm_symmetric(&sym) - exact).abs() <= 1e-8 * exact.max(1.0), "seed {seed}");
            let svd = b.clone().svd(false, false).singular_values.max();
            assert!((spectral_norm(&b) - svd).abs() <= 1e-8 * svd.max(1.0), "seed {seed}");
        }
    }

    #[test]
    fn step_matrix_norms_hold_on_small_instance() {
        let inst = GaussianLinearInstance::random(3, 5, 1, 0).unwrap();
        let s = Schedule::linear_alpha_bar(200).unwrap();
        let rule = GammaRule::Theorem2 {
            k: 2.0,
            lambda_min: inst.lambda_min(),
        };
        let report = norm_checks(&inst, &s, rule).unwrap();
        assert!(report.passed(), "{:?}", report.failures);
        assert_eq!(report.steps[0].f, 0.0);
        assert!(report.lambda_k < 1.0);
    }

    #[test]
    fn norms_agree_with_eigen_formulas() {
        let inst = GaussianLinearInstance::random(4, 6, 2, 0).unwrap();
        let s = Schedule::linear_alpha_bar(50).unwrap();
        let rule = GammaRule::Theorem2 {
            k: 3.0,
            lambda_min: inst.lambda_min(),
        };
        let report = norm_checks(&inst, &s, rule).unwrap();
        let lambdas = SymmetricEigen::new(inst.a().transpose() * inst.a()).eigenvalues;
        for st in &report.steps {
            let (ab, abp) = (s.alpha_bar(st.t), s.alpha_bar(st.t - 1));
            let c = ((1.0 - abp) * (1.0 - ab)).sqrt();
            let k = lambdas
                .iter()
                .map(|l| ((abp * ab).sqrt() / (1.0 + st.gamma * l) + c).abs())
                .fold(0.0, f64::max);
            let d = lambdas
                .iter()
                .map(|l| (st.gamma * abp.sqrt() * l / (1.0 + st.gamma * l) - 1.0).abs())
                .fold(0.0, f64::max);
            assert!((st.k - k).abs() <= 1e-8, "t={}", st.t);
            assert!((st.d - d).abs() <= 1e-8, "t={}", st.t);
        }
    }

    #[test]
    fn sampler_step_equals_matrix_recursion() {
        let inst = GaussianLinearInstance::random(4, 7, 3, 0).unwrap();
        let s = Schedule::linear_alpha_bar(30).unwrap();
        let d = GaussianDenoiser::new(inst.mu_series(), s.clone());
        let p = ResidualProjector::new(&inst.system().unwrap(), 1, 4, ResidualMethod::ClosedForm).unwrap();
        let rule = GammaRule::Theorem2 {
            k: 5.0,
            lambda_min: inst.lambda_min(),
        };
        let mut r = rng::stream(3, 1, Purpose::Selection, 0);
        for t in 1..=30 {
            let z = TimeSeries::univariate(rng::normals(&mut r, 4)).unwrap();
            let out = cps_step(&d, d.schedule(), Some(&p), rule, &z, t, None, None).unwrap();
            let gamma = rule.gamma(&s, t).unwrap();
            let expected = recursion_step(&inst, &s, t, gamma, &DVector::from_column_slice(z.as_slice())).unwrap();
            let got = DVector::from_column_slice(out.z_prev.as_slice());
            assert!((got - &expected).norm() <= 1e-8 * expected.norm().max(1.0), "t={t}");
        }
    }

    #[test]
    fn bound_holds_and_scales_with_k() {
        let inst = GaussianLinearInstance::random(4, 8, 4, 0).unwrap();
        let r10 = verify_theorem2(&inst, 2000, 10.0, 0).unwrap();
        let r100 = verify_theorem2(&inst, 2000, 100.0, 0).unwrap();
        assert!(r10.passed() && r100.passed(), "{r10:?} {r100:?}");
        assert_relative_eq!(r10.bound / r100.bound, 10.0, epsilon = 1e-12);
        assert!(verify_theorem2(&inst, 10, 1.0, 0).is_err());
    }

    #[test]
    fn feasible_mean_error_shrinks_with_steps() {
        let base = GaussianLinearInstance::random(3, 5, 5, 0).unwrap();
        let inst = GaussianLinearInstance::new(base.a().clone(), base.y().clone(), base.x_star().clone()).unwrap();
        let e1 = verify_theorem2(&inst, 1000, 2.0, 0).unwrap();
        let e4 = verify_theorem2(&inst, 4000, 2.0, 0).unwrap();
        assert!(e1.passed() && e4.passed());
        assert!(e4.measured <= e1.measured + 1e-9);
    }

    #[test]
    fn small_sweep_passes_and_writes_csv() {
        let cfg = SweepConfig {
            instances: 4,
            steps: 300,
            ..Default::default()
        };
        let rep = sweep(&cfg).unwrap();
        assert_eq!(rep.rows.len(), 12);
        assert!(rep.passed(), "{rep:?}");
        let csv = rep.to_csv();
        assert!(csv.starts_with("id,n,m,k,T,measured,bound,margin\n"));
        assert_eq!(csv.lines().count(), 13);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn median_is_order_free(mut v in proptest::collection::vec(-10.0f64..10.0, 1..20)) {
            let m1 = median(&mut v.clone());
            v.reverse();
            prop_assert_eq!(m1, median(&mut v));
        }
    }
}

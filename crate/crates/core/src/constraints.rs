//! Constraint descriptors, the violation function and compilation to affine form.
//!
//! Each constraint contributes `max(0, f(z))` to the violation. Equality-style
//! constraints use `|g(z) - target| - threshold` and bound-style constraints
//! (argmax/argmin locations, OHLC, trends, local extrema) carry no threshold.
//!
//! Timestamps and locations are 0-based in this module. The serialized form is
//! 1-based (`timestamp = 1` is the first step); channels are 0-based in both.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::series::TimeSeries;
use crate::{CpsError, Result};

/// Threshold applied to equality-style constraints during projection.
pub const DEFAULT_THRESHOLD: f64 = 0.005;
/// Allowed violation when judging a finished sample.
pub const DEFAULT_BUDGET: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    Up,
    Down,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConstraintKind {
    Mean { target: f64 },
    MeanConsecutiveChange { target: f64 },
    ValueAtTimestamp { timestamp: usize, value: f64 },
    /// Without a location the constraint is evaluated at the current argmax and
    /// cannot be compiled to affine rows.
    ValueAtArgmax { value: f64, location: Option<usize> },
    ValueAtArgmin { value: f64, location: Option<usize> },
    ArgmaxLocation { location: usize },
    ArgminLocation { location: usize },
    Ohlc {
        open: usize,
        high: usize,
        low: usize,
        close: usize,
    },
    Peak { location: usize, value: f64 },
    Valley { location: usize, value: f64 },
    /// Monotone run over steps `start..=end`.
    TrendSegment {
        start: usize,
        end: usize,
        direction: Trend,
    },
    /// `a . z <= bound` over the flattened (channel-major) sample.
    AffineInequality { coefficients: Vec<f64>, bound: f64 },
    /// `|a . z - target| <= threshold` over the flattened sample.
    AffineEquality { coefficients: Vec<f64>, target: f64 },
}

impl ConstraintKind {
    pub fn name(&self) -> &'static str {
        match self {
            ConstraintKind::Mean { .. } => "mean",
            ConstraintKind::MeanConsecutiveChange { .. } => "mean_consecutive_change",
            ConstraintKind::ValueAtTimestamp { .. } => "value_at_timestamp",
            ConstraintKind::ValueAtArgmax { .. } => "value_at_argmax",
            ConstraintKind::ValueAtArgmin { .. } => "value_at_argmin",
            ConstraintKind::ArgmaxLocation { .. } => "argmax_location",
            ConstraintKind::ArgminLocation { .. } => "argmin_location",
            ConstraintKind::Ohlc { .. } => "ohlc",
            ConstraintKind::Peak { .. } => "peak",
            ConstraintKind::Valley { .. } => "valley",
            ConstraintKind::TrendSegment { .. } => "trend_segment",
            ConstraintKind::AffineInequality { .. } => "affine_inequality",
            ConstraintKind::AffineEquality { .. } => "affine_equality",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConstraintRecord", into = "ConstraintRecord")]
pub struct Constraint {
    pub channel: usize,
    pub kind: ConstraintKind,
    pub threshold: f64,
}

impl Constraint {
    pub fn new(channel: usize, kind: ConstraintKind) -> Self {
        Self {
            channel,
            kind,
            threshold: DEFAULT_THRESHOLD,
        }
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn validate(&self, channels: usize, horizon: usize) -> Result<()> {
        let bad = |msg: String| Err(CpsError::invalid(format!("{} constraint: {msg}", self.kind.name())));
        if !(self.threshold >= 0.0) {
            return bad(format!("threshold {} must be nonnegative", self.threshold));
        }
        let uses_channel = !matches!(
            self.kind,
            ConstraintKind::Ohlc { .. }
                | ConstraintKind::AffineInequality { .. }
                | ConstraintKind::AffineEquality { .. }
        );
        if uses_channel && self.channel >= channels {
            return bad(format!("channel {} out of range for {channels} channels", self.channel));
        }
        let check_t = |t: usize| -> Result<()> {
            if t >= horizon {
                Err(CpsError::invalid(format!(
                    "{} constraint: step {} outside horizon {horizon}",
                    self.kind.name(),
                    t + 1
                )))
            } else {
                Ok(())
            }
        };
        match &self.kind {
            ConstraintKind::Mean { target } => finite(*target)?,
            ConstraintKind::MeanConsecutiveChange { target } => {
                finite(*target)?;
                if horizon < 2 {
                    return bad("needs a horizon of at least 2".into());
                }
            }
            ConstraintKind::ValueAtTimestamp { timestamp, value } => {
                check_t(*timestamp)?;
                finite(*value)?;
            }
            ConstraintKind::ValueAtArgmax { value, location }
            | ConstraintKind::ValueAtArgmin { value, location } => {
                finite(*value)?;
                if let Some(l) = location {
                    check_t(*l)?;
                }
            }
            ConstraintKind::ArgmaxLocation { location } | ConstraintKind::ArgminLocation { location } => {
                check_t(*location)?
            }
            ConstraintKind::Ohlc {
                open,
                high,
                low,
                close,
            } => {
                for c in [open, high, low, close] {
                    if *c >= channels {
                        return bad(format!("channel {c} out of range for {channels} channels"));
                    }
                }
            }
            ConstraintKind::Peak { location, value } | ConstraintKind::Valley { location, value } => {
                check_t(*location)?;
                finite(*value)?;
            }
            ConstraintKind::TrendSegment { start, end, .. } => {
                check_t(*end)?;
                if start >= end {
                    return bad(format!("start {} must precede end {}", start + 1, end + 1));
                }
            }
            ConstraintKind::AffineInequality { coefficients, bound: rhs }
            | ConstraintKind::AffineEquality {
                coefficients,
                target: rhs,
            } => {
                if coefficients.len() != channels * horizon {
                    return bad(format!(
                        "{} coefficients for a {channels}x{horizon} sample",
                        coefficients.len()
                    ));
                }
                finite(*rhs)?;
                for c in coefficients {
                    finite(*c)?;
                }
            }
        }
        Ok(())
    }

    /// `max(0, f(z))` with equality parts relaxed by the threshold.
    pub fn violation(&self, z: &TimeSeries) -> f64 {
        self.violation_with(z, self.threshold)
    }

    /// Violation with no threshold slack.
    pub fn raw_violation(&self, z: &TimeSeries) -> f64 {
        self.violation_with(z, 0.0)
    }

    fn violation_with(&self, z: &TimeSeries, thr: f64) -> f64 {
        let eq = |g: f64, target: f64| ((g - target).abs() - thr).max(0.0);
        let pos = |v: f64| v.max(0.0);
        match &self.kind {
            ConstraintKind::Mean { target } => {
                let x = z.channel(self.channel);
                eq(x.iter().sum::<f64>() / x.len() as f64, *target)
            }
            ConstraintKind::MeanConsecutiveChange { target } => {
                let x = z.channel(self.channel);
                let diffs: f64 = x.windows(2).map(|w| w[1] - w[0]).sum();
                eq(diffs / (x.len() - 1) as f64, *target)
            }
            ConstraintKind::ValueAtTimestamp { timestamp, value } => {
                eq(z.get(self.channel, *timestamp), *value)
            }
            ConstraintKind::ValueAtArgmax { value, location } => {
                let x = z.channel(self.channel);
                let j = location.unwrap_or_else(|| argmax(x));
                eq(x[j], *value) + x.iter().map(|v| pos(v - x[j])).sum::<f64>()
            }
            ConstraintKind::ValueAtArgmin { value, location } => {
                let x = z.channel(self.channel);
                let j = location.unwrap_or_else(|| argmin(x));
                eq(x[j], *value) + x.iter().map(|v| pos(x[j] - v)).sum::<f64>()
            }
            ConstraintKind::ArgmaxLocation { location } => {
                let x = z.channel(self.channel);
                x.iter().map(|v| pos(v - x[*location])).sum()
            }
            ConstraintKind::ArgminLocation { location } => {
                let x = z.channel(self.channel);
                x.iter().map(|v| pos(x[*location] - v)).sum()
            }
            ConstraintKind::Ohlc {
                open,
                high,
                low,
                close,
            } => {
                let (o, h, l, c) = (z.channel(*open), z.channel(*high), z.channel(*low), z.channel(*close));
                (0..z.horizon())
                    .map(|u| pos(o[u] - h[u]) + pos(c[u] - h[u]) + pos(l[u] - o[u]) + pos(l[u] - c[u]))
                    .sum()
            }
            ConstraintKind::Peak { location, value } => {
                let x = z.channel(self.channel);
                let j = *location;
                eq(x[j], *value) + neighbours(j, x.len()).map(|u| pos(x[u] - x[j])).sum::<f64>()
            }
            ConstraintKind::Valley { location, value } => {
                let x = z.channel(self.channel);
                let j = *location;
                eq(x[j], *value) + neighbours(j, x.len()).map(|u| pos(x[j] - x[u])).sum::<f64>()
            }
            ConstraintKind::TrendSegment { start, end, direction } => {
                let x = z.channel(self.channel);
                (*start..*end)
                    .map(|u| match direction {
                        Trend::Up => pos(x[u] - x[u + 1]),
                        Trend::Down => pos(x[u + 1] - x[u]),
                    })
                    .sum()
            }
            ConstraintKind::AffineInequality { coefficients, bound } => {
                pos(dot(coefficients, z.as_slice()) - bound)
            }
            ConstraintKind::AffineEquality { coefficients, target } => {
                eq(dot(coefficients, z.as_slice()), *target)
            }
        }
    }

    /// Affine rows equivalent to this constraint. Location-free argmax/argmin
    /// values are resolved at `at` when given, otherwise rejected.
    fn rows(&self, index: usize, horizon: usize, at: Option<&TimeSeries>) -> Result<Vec<AffineRow>> {
        let l = horizon;
        let base = self.channel * l;
        let thr = self.threshold;
        let eq_row = |coeffs: Vec<(usize, f64)>, rhs: f64| AffineRow {
            coeffs,
            rhs,
            kind: RowKind::Equality,
            threshold: thr,
        };
        let le_row = |coeffs: Vec<(usize, f64)>, rhs: f64| AffineRow {
            coeffs,
            rhs,
            kind: RowKind::Inequality,
            threshold: 0.0,
        };
        // x[a] - x[b] <= 0
        let order = |a: usize, b: usize| le_row(vec![(a, 1.0), (b, -1.0)], 0.0);
        let resolve = |location: &Option<usize>, find: fn(&[f64]) -> usize| -> Result<usize> {
            match (location, at) {
                (Some(j), _) => Ok(*j),
                (None, Some(z)) => Ok(find(z.channel(self.channel))),
                (None, None) => Err(CpsError::NonAffine {
                    index,
                    kind: self.kind.name(),
                    reason: "the location must be supplied (e.g. from a paired argmax/argmin constraint)"
                        .into(),
                }),
            }
        };

        let rows = match &self.kind {
            ConstraintKind::Mean { target } => {
                vec![eq_row((0..l).map(|u| (base + u, 1.0 / l as f64)).collect(), *target)]
            }
            ConstraintKind::MeanConsecutiveChange { target } => {
                let w = 1.0 / (l - 1) as f64;
                vec![eq_row(vec![(base, -w), (base + l - 1, w)], *target)]
            }
            ConstraintKind::ValueAtTimestamp { timestamp, value } => {
                vec![eq_row(vec![(base + timestamp, 1.0)], *value)]
            }
            ConstraintKind::ValueAtArgmax { value, location } => {
                let j = resolve(location, argmax)?;
                let mut rows = vec![eq_row(vec![(base + j, 1.0)], *value)];
                rows.extend((0..l).filter(|u| *u != j).map(|u| order(base + u, base + j)));
                rows
            }
            ConstraintKind::ValueAtArgmin { value, location } => {
                let j = resolve(location, argmin)?;
                let mut rows = vec![eq_row(vec![(base + j, 1.0)], *value)];
                rows.extend((0..l).filter(|u| *u != j).map(|u| order(base + j, base + u)));
                rows
            }
            ConstraintKind::ArgmaxLocation { location } => (0..l)
                .filter(|u| u != location)
                .map(|u| order(base + u, base + location))
                .collect(),
            ConstraintKind::ArgminLocation { location } => (0..l)
                .filter(|u| u != location)
                .map(|u| order(base + location, base + u))
                .collect(),
            ConstraintKind::Ohlc {
                open,
                high,
                low,
                close,
            } => {
                let (o, h, lo, c) = (open * l, high * l, low * l, close * l);
                let mut rows = Vec::with_capacity(4 * l);
                for u in 0..l {
                    rows.push(order(o + u, h + u));
                    rows.push(order(c + u, h + u));
                    rows.push(order(lo + u, o + u));
                    rows.push(order(lo + u, c + u));
                }
                rows
            }
            ConstraintKind::Peak { location, value } => {
                let j = *location;
                let mut rows = vec![eq_row(vec![(base + j, 1.0)], *value)];
                rows.extend(neighbours(j, l).map(|u| order(base + u, base + j)));
                rows
            }
            ConstraintKind::Valley { location, value } => {
                let j = *location;
                let mut rows = vec![eq_row(vec![(base + j, 1.0)], *value)];
                rows.extend(neighbours(j, l).map(|u| order(base + j, base + u)));
                rows
            }
            ConstraintKind::TrendSegment { start, end, direction } => (*start..*end)
                .map(|u| match direction {
                    Trend::Up => order(base + u, base + u + 1),
                    Trend::Down => order(base + u + 1, base + u),
                })
                .collect(),
            ConstraintKind::AffineInequality { coefficients, bound } => {
                vec![le_row(sparse(coefficients), *bound)]
            }
            ConstraintKind::AffineEquality { coefficients, target } => {
                vec![eq_row(sparse(coefficients), *target)]
            }
        };
        Ok(rows)
    }

    /// Pinned `(flat index, value)` pairs: fixed-value constraints whose location is known.
    pub fn fixed_values(&self, horizon: usize) -> Vec<(usize, f64)> {
        let base = self.channel * horizon;
        match &self.kind {
            ConstraintKind::ValueAtTimestamp { timestamp, value } => vec![(base + timestamp, *value)],
            ConstraintKind::ValueAtArgmax {
                value,
                location: Some(j),
            }
            | ConstraintKind::ValueAtArgmin {
                value,
                location: Some(j),
            }
            | ConstraintKind::Peak { location: j, value }
            | ConstraintKind::Valley { location: j, value } => vec![(base + j, *value)],
            _ => Vec::new(),
        }
    }
}

fn finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(CpsError::invalid(format!("constraint parameter {v} is not finite")))
    }
}

fn neighbours(j: usize, len: usize) -> impl Iterator<Item = usize> {
    let left = j.checked_sub(1);
    let right = if j + 1 < len { Some(j + 1) } else { None };
    left.into_iter().chain(right)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sparse(coefficients: &[f64]) -> Vec<(usize, f64)> {
    coefficients
        .iter()
        .enumerate()
        .filter(|(_, c)| **c != 0.0)
        .map(|(i, c)| (i, *c))
        .collect()
}

/// First index of the maximum.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

/// First index of the minimum.
pub fn argmin(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v < x[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Constraint sets
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSet {
    #[serde(default = "default_budget")]
    pub budget: f64,
    #[serde(default)]
    pub constraints: Vec<Constraint>,
}

fn default_budget() -> f64 {
    DEFAULT_BUDGET
}

impl Default for ConstraintSet {
    fn default() -> Self {
        Self {
            budget: DEFAULT_BUDGET,
            constraints: Vec::new(),
        }
    }
}

impl ConstraintSet {
    pub fn new(constraints: Vec<Constraint>) -> Self {
        Self {
            budget: DEFAULT_BUDGET,
            constraints,
        }
    }

    pub fn with_budget(mut self, budget: f64) -> Self {
        self.budget = budget;
        self
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn validate(&self, channels: usize, horizon: usize) -> Result<()> {
        if !(self.budget >= 0.0) {
            return Err(CpsError::invalid(format!("budget {} must be nonnegative", self.budget)));
        }
        self.constraints
            .iter()
            .try_for_each(|c| c.validate(channels, horizon))
    }

    /// `Pi(z) = sum_i max(0, f_i(z))`, thresholds applied.
    pub fn violation(&self, z: &TimeSeries) -> f64 {
        self.constraints.iter().map(|c| c.violation(z)).sum()
    }

    /// Per-constraint violation in excess of the evaluation budget.
    pub fn per_constraint_violation(&self, z: &TimeSeries) -> Vec<f64> {
        self.constraints
            .iter()
            .map(|c| (c.raw_violation(z) - self.budget).max(0.0))
            .collect()
    }

    pub fn compile_affine(&self, channels: usize, horizon: usize) -> Result<AffineSystem> {
        self.build_system(channels, horizon, None)
    }

    /// Affine rows with location-free argmax/argmin values pinned at `z`'s
    /// current extremum. Agrees with [`ConstraintSet::violation`] at `z`.
    pub fn local_system(&self, z: &TimeSeries) -> Result<AffineSystem> {
        self.build_system(z.channels(), z.horizon(), Some(z))
    }

    fn build_system(&self, channels: usize, horizon: usize, at: Option<&TimeSeries>) -> Result<AffineSystem> {
        self.validate(channels, horizon)?;
        let mut rows = Vec::new();
        for (i, c) in self.constraints.iter().enumerate() {
            rows.extend(c.rows(i, horizon, at)?);
        }
        Ok(AffineSystem {
            dim: channels * horizon,
            rows,
        })
    }

    /// A subgradient of `Pi` at `z`, taking 0 at every kink.
    pub fn subgradient(&self, z: &TimeSeries) -> Result<Vec<f64>> {
        Ok(self.local_system(z)?.hinge_subgradient(z.as_slice()))
    }

    pub fn fixed_values(&self, horizon: usize) -> Vec<(usize, f64)> {
        self.constraints
            .iter()
            .flat_map(|c| c.fixed_values(horizon))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Affine systems
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    /// `a . z <= b`
    Inequality,
    /// `a . z = b`, relaxed by the row threshold.
    Equality,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineRow {
    /// Sparse `(column, coefficient)` pairs.
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
    pub kind: RowKind,
    pub threshold: f64,
}

impl AffineRow {
    pub fn residual(&self, z: &[f64]) -> f64 {
        self.coeffs.iter().map(|(i, a)| a * z[*i]).sum::<f64>() - self.rhs
    }

    pub fn violation(&self, z: &[f64]) -> f64 {
        let r = self.residual(z);
        match self.kind {
            RowKind::Inequality => (r - self.threshold).max(0.0),
            RowKind::Equality => (r.abs() - self.threshold).max(0.0),
        }
    }
}

/// `m` affine rows over an `n`-dimensional flattened sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineSystem {
    dim: usize,
    rows: Vec<AffineRow>,
}

impl AffineSystem {
    pub fn new(dim: usize, rows: Vec<AffineRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(CpsError::invalid("affine system needs at least one row"));
        }
        for r in &rows {
            if r.coeffs.iter().any(|(i, a)| *i >= dim || !a.is_finite()) || !r.rhs.is_finite() {
                return Err(CpsError::invalid("affine row has out-of-range column or non-finite entry"));
            }
        }
        Ok(Self { dim, rows })
    }

    /// Equality-only system `A z = b` from a dense row-major matrix.
    pub fn equalities(a: &nalgebra::DMatrix<f64>, b: &[f64]) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(CpsError::invalid("matrix rows and right-hand side differ in length"));
        }
        let rows = (0..a.nrows())
            .map(|i| AffineRow {
                coeffs: (0..a.ncols()).map(|j| (j, a[(i, j)])).filter(|(_, v)| *v != 0.0).collect(),
                rhs: b[i],
                kind: RowKind::Equality,
                threshold: 0.0,
            })
            .collect();
        Self::new(a.ncols(), rows)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> &[AffineRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row_kinds(&self) -> Vec<RowKind> {
        self.rows.iter().map(|r| r.kind).collect()
    }

    pub fn is_equality_only(&self) -> bool {
        self.rows.iter().all(|r| r.kind == RowKind::Equality)
    }

    /// Dense `m x n` coefficient matrix.
    pub fn matrix(&self) -> nalgebra::DMatrix<f64> {
        let mut a = nalgebra::DMatrix::zeros(self.rows.len(), self.dim);
        for (i, r) in self.rows.iter().enumerate() {
            for (j, v) in &r.coeffs {
                a[(i, *j)] += v;
            }
        }
        a
    }

    pub fn rhs(&self) -> nalgebra::DVector<f64> {
        nalgebra::DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| r.rhs))
    }

    /// Sum over rows of the thresholded positive part.
    pub fn violation(&self, z: &[f64]) -> f64 {
        self.rows.iter().map(|r| r.violation(z)).sum()
    }

    /// Expand into one-sided hinge rows `max(0, g . z - h)`.
    pub fn hinges(&self) -> Vec<HingeRow> {
        let mut out = Vec::with_capacity(self.rows.len());
        for r in &self.rows {
            out.push(HingeRow::new(r.coeffs.clone(), r.rhs + r.threshold));
            if r.kind == RowKind::Equality {
                out.push(HingeRow::new(
                    r.coeffs.iter().map(|(i, a)| (*i, -a)).collect(),
                    -r.rhs + r.threshold,
                ));
            }
        }
        out
    }

    fn hinge_subgradient(&self, z: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        for h in self.hinges() {
            if h.value(z) > 0.0 {
                for (i, a) in &h.coeffs {
                    g[*i] += a;
                }
            }
        }
        g
    }
}

/// `max(0, g . z - h)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HingeRow {
    pub coeffs: Vec<(usize, f64)>,
    pub offset: f64,
    pub norm_sq: f64,
}

impl HingeRow {
    pub fn new(coeffs: Vec<(usize, f64)>, offset: f64) -> Self {
        let norm_sq = coeffs.iter().map(|(_, a)| a * a).sum();
        Self {
            coeffs,
            offset,
            norm_sq,
        }
    }

    pub fn residual(&self, z: &[f64]) -> f64 {
        self.coeffs.iter().map(|(i, a)| a * z[*i]).sum::<f64>() - self.offset
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        self.residual(z).max(0.0)
    }
}

// ---------------------------------------------------------------------------
// Feature extraction
// ---------------------------------------------------------------------------

/// A statistical feature read off a reference sample and imposed as a constraint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Feature {
    Mean,
    MeanConsecutiveChange,
    /// 0-based step.
    ValueAt(usize),
    /// Last step of the horizon.
    ValueAtLast,
    Argmax,
    Argmin,
    ValueAtArgmax,
    ValueAtArgmin,
    /// Every interior strict local maximum, with its value.
    Peaks,
    Valleys,
    /// Monotone run from the global maximum to its adjacent valley.
    Trend,
}

impl FromStr for Feature {
    type Err = CpsError;

    fn from_str(s: &str) -> Result<Self> {
        let f = match s {
            "mean" => Feature::Mean,
            "mean_consecutive_change" => Feature::MeanConsecutiveChange,
            "argmax" => Feature::Argmax,
            "argmin" => Feature::Argmin,
            "value_at_argmax" => Feature::ValueAtArgmax,
            "value_at_argmin" => Feature::ValueAtArgmin,
            "peaks" => Feature::Peaks,
            "valleys" => Feature::Valleys,
            "trend" => Feature::Trend,
            "value@last" => Feature::ValueAtLast,
            other => match other.strip_prefix("value@").map(str::parse::<usize>) {
                Some(Ok(t)) if t >= 1 => Feature::ValueAt(t - 1),
                _ => {
                    return Err(CpsError::invalid(format!(
                        "unknown feature {other:?}; expected mean, mean_consecutive_change, value@<step>, \
                         value@last, argmax, argmin, value_at_argmax, value_at_argmin, peaks, valleys or trend"
                    )))
                }
            },
        };
        Ok(f)
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Feature::Mean => f.write_str("mean"),
            Feature::MeanConsecutiveChange => f.write_str("mean_consecutive_change"),
            Feature::ValueAt(t) => write!(f, "value@{}", t + 1),
            Feature::ValueAtLast => f.write_str("value@last"),
            Feature::Argmax => f.write_str("argmax"),
            Feature::Argmin => f.write_str("argmin"),
            Feature::ValueAtArgmax => f.write_str("value_at_argmax"),
            Feature::ValueAtArgmin => f.write_str("value_at_argmin"),
            Feature::Peaks => f.write_str("peaks"),
            Feature::Valleys => f.write_str("valleys"),
            Feature::Trend => f.write_str("trend"),
        }
    }
}

/// The waveform protocol's feature ordering: the first `n` of
/// mean, first value, last value, peak, valley, values at steps 24/48/72,
/// mean consecutive change and the peak-to-valley trend.
pub fn waveform_features(n: usize) -> Vec<Feature> {
    let all = [
        Feature::Mean,
        Feature::ValueAt(0),
        Feature::ValueAtLast,
        Feature::ValueAtArgmax,
        Feature::ValueAtArgmin,
        Feature::ValueAt(23),
        Feature::ValueAt(47),
        Feature::ValueAt(71),
        Feature::MeanConsecutiveChange,
        Feature::Trend,
    ];
    all[..n.min(all.len())].to_vec()
}

/// Read each feature from every channel of `reference`.
pub fn extract(reference: &TimeSeries, features: &[Feature], threshold: f64) -> Result<ConstraintSet> {
    let l = reference.horizon();
    let mut out = Vec::new();
    for ch in 0..reference.channels() {
        let x = reference.channel(ch);
        for f in features {
            let kinds = match *f {
                Feature::Mean => vec![ConstraintKind::Mean {
                    target: x.iter().sum::<f64>() / l as f64,
                }],
                Feature::MeanConsecutiveChange => {
                    if l < 2 {
                        return Err(CpsError::invalid("mean consecutive change needs a horizon of 2"));
                    }
                    vec![ConstraintKind::MeanConsecutiveChange {
                        target: x.windows(2).map(|w| w[1] - w[0]).sum::<f64>() / (l - 1) as f64,
                    }]
                }
                Feature::ValueAt(t) => {
                    if t >= l {
                        return Err(CpsError::invalid(format!("step {} outside horizon {l}", t + 1)));
                    }
                    vec![ConstraintKind::ValueAtTimestamp {
                        timestamp: t,
                        value: x[t],
                    }]
                }
                Feature::ValueAtLast => vec![ConstraintKind::ValueAtTimestamp {
                    timestamp: l - 1,
                    value: x[l - 1],
                }],
                Feature::Argmax => vec![ConstraintKind::ArgmaxLocation { location: argmax(x) }],
                Feature::Argmin => vec![ConstraintKind::ArgminLocation { location: argmin(x) }],
                Feature::ValueAtArgmax => {
                    let j = argmax(x);
                    vec![ConstraintKind::ValueAtArgmax {
                        value: x[j],
                        location: Some(j),
                    }]
                }
                Feature::ValueAtArgmin => {
                    let j = argmin(x);
                    vec![ConstraintKind::ValueAtArgmin {
                        value: x[j],
                        location: Some(j),
                    }]
                }
                Feature::Peaks => (1..l.saturating_sub(1))
                    .filter(|&u| x[u] > x[u - 1] && x[u] > x[u + 1])
                    .map(|u| ConstraintKind::Peak {
                        location: u,
                        value: x[u],
                    })
                    .collect(),
                Feature::Valleys => (1..l.saturating_sub(1))
                    .filter(|&u| x[u] < x[u - 1] && x[u] < x[u + 1])
                    .map(|u| ConstraintKind::Valley {
                        location: u,
                        value: x[u],
                    })
                    .collect(),
                Feature::Trend => trend_from_peak(x).into_iter().collect(),
            };
            out.extend(
                kinds
                    .into_iter()
                    .map(|kind| Constraint::new(ch, kind).with_threshold(threshold)),
            );
        }
    }
    Ok(ConstraintSet::new(out))
}

fn trend_from_peak(x: &[f64]) -> Option<ConstraintKind> {
    let j = argmax(x);
    let mut end = j;
    while end + 1 < x.len() && x[end + 1] <= x[end] {
        end += 1;
    }
    if end > j {
        return Some(ConstraintKind::TrendSegment {
            start: j,
            end,
            direction: Trend::Down,
        });
    }
    let mut start = j;
    while start > 0 && x[start - 1] <= x[start] {
        start -= 1;
    }
    (start < j).then_some(ConstraintKind::TrendSegment {
        start,
        end: j,
        direction: Trend::Up,
    })
}

// ---------------------------------------------------------------------------
// Serialized form
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstraintParams {
    #[serde(skip_serializing_if = "Option::is_none")]
    target: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    timestamp: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    location: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    start: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    end: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    direction: Option<Trend>,
    #[serde(skip_serializing_if = "Option::is_none")]
    open: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    high: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    low: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    close: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    coefficients: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bound: Option<f64>,
}

/// On-disk form: `kind`, `channel`, `params`, `threshold`. Steps are 1-based.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstraintRecord {
    kind: String,
    #[serde(default)]
    channel: usize,
    #[serde(default)]
    params: ConstraintParams,
    #[serde(default = "default_threshold")]
    threshold: f64,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

impl TryFrom<ConstraintRecord> for Constraint {
    type Error = String;

    fn try_from(r: ConstraintRecord) -> std::result::Result<Self, String> {
        let p = r.params;
        let kind_name = r.kind.clone();
        let need_f = |v: Option<f64>, name: &str| v.ok_or_else(|| format!("{kind_name}: missing params.{name}"));
        let need_u = |v: Option<usize>, name: &str| v.ok_or_else(|| format!("{kind_name}: missing params.{name}"));
        let step = |v: Option<usize>, name: &str| -> std::result::Result<usize, String> {
            let t = need_u(v, name)?;
            t.checked_sub(1)
                .ok_or_else(|| format!("{kind_name}: params.{name} is 1-based, got 0"))
        };
        let opt_step = |v: Option<usize>, name: &str| -> std::result::Result<Option<usize>, String> {
            v.map(|t| t.checked_sub(1).ok_or_else(|| format!("{kind_name}: params.{name} is 1-based, got 0")))
                .transpose()
        };
        let kind = match r.kind.as_str() {
            "mean" => ConstraintKind::Mean {
                target: need_f(p.target, "target")?,
            },
            "mean_consecutive_change" => ConstraintKind::MeanConsecutiveChange {
                target: need_f(p.target, "target")?,
            },
            "value_at_timestamp" => ConstraintKind::ValueAtTimestamp {
                timestamp: step(p.timestamp, "timestamp")?,
                value: need_f(p.value, "value")?,
            },
            "value_at_argmax" => ConstraintKind::ValueAtArgmax {
                value: need_f(p.value, "value")?,
                location: opt_step(p.location, "location")?,
            },
            "value_at_argmin" => ConstraintKind::ValueAtArgmin {
                value: need_f(p.value, "value")?,
                location: opt_step(p.location, "location")?,
            },
            "argmax_location" => ConstraintKind::ArgmaxLocation {
                location: step(p.location, "location")?,
            },
            "argmin_location" => ConstraintKind::ArgminLocation {
                location: step(p.location, "location")?,
            },
            "ohlc" => ConstraintKind::Ohlc {
                open: need_u(p.open, "open")?,
                high: need_u(p.high, "high")?,
                low: need_u(p.low, "low")?,
                close: need_u(p.close, "close")?,
            },
            "peak" => ConstraintKind::Peak {
                location: step(p.location, "location")?,
                value: need_f(p.value, "value")?,
            },
            "valley" => ConstraintKind::Valley {
                location: step(p.location, "location")?,
                value: need_f(p.value, "value")?,
            },
            "trend_segment" => ConstraintKind::TrendSegment {
                start: step(p.start, "start")?,
                end: step(p.end, "end")?,
                direction: p.direction.ok_or_else(|| format!("{kind_name}: missing params.direction"))?,
            },
            "affine_inequality" => ConstraintKind::AffineInequality {
                coefficients: p.coefficients.ok_or_else(|| format!("{kind_name}: missing params.coefficients"))?,
                bound: need_f(p.bound, "bound")?,
            },
            "affine_equality" => ConstraintKind::AffineEquality {
                coefficients: p.coefficients.ok_or_else(|| format!("{kind_name}: missing params.coefficients"))?,
                target: need_f(p.target, "target")?,
            },
            other => return Err(format!("unknown constraint kind {other:?}")),
        };
        if !(r.threshold >= 0.0) {
            return Err(format!("{kind_name}: threshold must be nonnegative"));
        }
        Ok(Constraint {
            channel: r.channel,
            kind,
            threshold: r.threshold,
        })
    }
}

impl From<Constraint> for ConstraintRecord {
    fn from(c: Constraint) -> Self {
        let mut p = ConstraintParams::default();
        match c.kind.clone() {
            ConstraintKind::Mean { target } | ConstraintKind::MeanConsecutiveChange { target } => {
                p.target = Some(target)
            }
            ConstraintKind::ValueAtTimestamp { timestamp, value } => {
                p.timestamp = Some(timestamp + 1);
                p.value = Some(value);
            }
            ConstraintKind::ValueAtArgmax { value, location } | ConstraintKind::ValueAtArgmin { value, location } => {
                p.value = Some(value);
                p.location = location.map(|l| l + 1);
            }
            ConstraintKind::ArgmaxLocation { location } | ConstraintKind::ArgminLocation { location } => {
                p.location = Some(location + 1)
            }
            ConstraintKind::Ohlc {
                open,
                high,
                low,
                close,
            } => {
                p.open = Some(open);
                p.high = Some(high);
                p.low = Some(low);
                p.close = Some(close);
            }
            ConstraintKind::Peak { location, value } | ConstraintKind::Valley { location, value } => {
                p.location = Some(location + 1);
                p.value = Some(value);
            }
            ConstraintKind::TrendSegment { start, end, direction } => {
                p.start = Some(start + 1);
                p.end = Some(end + 1);
                p.direction = Some(direction);
            }
            ConstraintKind::AffineInequality { coefficients, bound } => {
                p.coefficients = Some(coefficients);
                p.bound = Some(bound);
            }
            ConstraintKind::AffineEquality { coefficients, target } => {
                p.coefficients = Some(coefficients);
                p.target = Some(target);
            }
        }
        ConstraintRecord {
            kind: c.kind.name().to_string(),
            channel: c.channel,
            params: p,
            threshold: c.threshold,
        }
    }
}

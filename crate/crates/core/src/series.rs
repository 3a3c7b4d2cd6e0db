//! Time-series data model, synthetic waveforms, CSV exchange and the forward-noising transform.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{self, Purpose};
use crate::schedule::Schedule;
use crate::{CpsError, Result};

/// A `K x L` real-valued sample, stored channel-major (`values[k * L + u]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    channels: usize,
    horizon: usize,
    values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(channels: usize, horizon: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || horizon == 0 {
            return Err(CpsError::invalid(format!(
                "series needs at least one channel and one step, got {channels}x{horizon}"
            )));
        }
        if values.len() != channels * horizon {
            return Err(CpsError::invalid(format!(
                "{} values cannot fill a {channels}x{horizon} series",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(CpsError::invalid(format!(
                "non-finite value at channel {}, step {}",
                i / horizon,
                i % horizon
            )));
        }
        Ok(Self {
            channels,
            horizon,
            values,
        })
    }

    /// Build without the finiteness scan. Used on hot paths where the caller
    /// checks finiteness separately.
    pub(crate) fn from_raw(channels: usize, horizon: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), channels * horizon);
        Self {
            channels,
            horizon,
            values,
        }
    }

    pub fn zeros(channels: usize, horizon: usize) -> Self {
        Self::from_raw(channels, horizon, vec![0.0; channels * horizon])
    }

    pub fn from_channels(rows: &[Vec<f64>]) -> Result<Self> {
        let horizon = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != horizon) {
            return Err(CpsError::invalid("channels have different lengths"));
        }
        Self::new(rows.len(), horizon, rows.concat())
    }

    pub fn univariate(values: Vec<f64>) -> Result<Self> {
        Self::new(1, values.len(), values)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.channels, self.horizon)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, channel: usize, step: usize) -> f64 {
        self.values[channel * self.horizon + step]
    }

    pub fn set(&mut self, channel: usize, step: usize, value: f64) {
        self.values[channel * self.horizon + step] = value;
    }

    pub fn channel(&self, channel: usize) -> &[f64] {
        &self.values[channel * self.horizon..(channel + 1) * self.horizon]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn check_shape(&self, expected: (usize, usize)) -> Result<()> {
        if self.shape() == expected {
            Ok(())
        } else {
            Err(CpsError::ShapeMismatch {
                expected,
                got: self.shape(),
            })
        }
    }

    /// `a * self + b * other`, elementwise.
    pub fn combine(&self, a: f64, other: &TimeSeries, b: f64) -> Result<TimeSeries> {
        other.check_shape(self.shape())?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(Self::from_raw(self.channels, self.horizon, values))
    }

    pub fn distance(&self, other: &TimeSeries) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Per-channel affine normalization record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("normalization serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let n: Normalization =
            toml::from_str(text).map_err(|e| CpsError::invalid(format!("normalization record: {e}")))?;
        if n.mean.len() != n.std.len() || n.std.iter().any(|s| !(*s > 0.0)) {
            return Err(CpsError::invalid(
                "normalization record needs matching mean/std lists with positive std",
            ));
        }
        Ok(n)
    }
}

/// Samples of identical shape, optionally carrying the normalization applied to them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<TimeSeries>,
    normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(samples: Vec<TimeSeries>) -> Result<Self> {
        let first = samples.first().ok_or(CpsError::EmptyDataset)?;
        let shape = first.shape();
        for s in &samples {
            s.check_shape(shape)?;
        }
        Ok(Self {
            samples,
            normalization: None,
        })
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Result<Self> {
        if normalization.mean.len() != self.shape().0 {
            return Err(CpsError::invalid("normalization record has wrong channel count"));
        }
        self.normalization = Some(normalization);
        Ok(self)
    }

    pub fn samples(&self) -> &[TimeSeries] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<TimeSeries> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.samples[0].shape()
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    /// Split into consecutive pieces of the given sizes.
    pub fn split(&self, sizes: &[usize]) -> Result<Vec<Dataset>> {
        if sizes.iter().sum::<usize>() > self.len() {
            return Err(CpsError::invalid("split sizes exceed dataset length"));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &n in sizes {
            let mut part = Dataset::new(self.samples[start..start + n].to_vec())?;
            part.normalization = self.normalization.clone();
            out.push(part);
            start += n;
        }
        Ok(out)
    }
}

/// Univariate sinusoids `a * sin(2 pi f u / L + phi)` with `a ~ U(amp_range)`,
/// `phi ~ U(0, 2 pi)` and integer `f` uniform below the Nyquist limit.
pub fn generate_waveforms(
    count: usize,
    horizon: usize,
    amp_range: (f64, f64),
    seed: u64,
) -> Result<Dataset> {
    if count == 0 {
        return Err(CpsError::EmptyDataset);
    }
    if horizon < 2 {
        return Err(CpsError::invalid(format!("waveform horizon must be >= 2, got {horizon}")));
    }
    let (lo, hi) = amp_range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(CpsError::invalid(format!(
            "amplitude range must lie within (0, 1], got ({lo}, {hi})"
        )));
    }
    let max_freq = ((horizon - 1) / 2).max(1);
    let samples = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, i as u64, Purpose::Dataset, 0);
            let amp = if lo == hi { lo } else { r.random_range(lo..hi) };
            let phase = r.random_range(0.0..2.0 * PI);
            let freq = r.random_range(1..=max_freq);
            sinusoid(horizon, amp, freq as f64, phase)
        })
        .collect();
    Dataset::new(samples)
}

/// `amp * sin(2 pi freq u / L + phase)` for `u` in `0..L`.
pub fn sinusoid(horizon: usize, amp: f64, freq: f64, phase: f64) -> TimeSeries {
    let values = (0..horizon)
        .map(|u| amp * (2.0 * PI * freq * u as f64 / horizon as f64 + phase).sin())
        .collect();
    TimeSeries::from_raw(1, horizon, values)
}

/// Per-channel zero-mean, unit-variance transform (population statistics over
/// every sample and step).
pub fn normalize(ds: &Dataset) -> Result<Dataset> {
    let (k, l) = ds.shape();
    let n = (ds.len() * l) as f64;
    let mut mean = vec![0.0; k];
    let mut std = vec![0.0; k];
    for c in 0..k {
        let m = ds.samples.iter().flat_map(|s| s.channel(c)).sum::<f64>() / n;
        let var = ds
            .samples
            .iter()
            .flat_map(|s| s.channel(c))
            .map(|v| (v - m) * (v - m))
            .sum::<f64>()
            / n;
        let sd = var.sqrt();
        if !(sd > 1e-12 * m.abs().max(1.0)) {
            return Err(CpsError::ConstantChannel { channel: c });
        }
        mean[c] = m;
        std[c] = sd;
    }
    let norm = Normalization { mean, std };
    let samples = ds
        .samples
        .iter()
        .map(|s| apply(s, &norm, |v, m, sd| (v - m) / sd))
        .collect();
    Dataset::new(samples)?.with_normalization(norm)
}

pub fn denormalize(ds: &Dataset) -> Result<Dataset> {
    let norm = ds
        .normalization
        .as_ref()
        .ok_or_else(|| CpsError::invalid("dataset carries no normalization record"))?;
    let samples = ds
        .samples
        .iter()
        .map(|s| apply(s, norm, |v, m, sd| v * sd + m))
        .collect();
    Dataset::new(samples)
}

/// Map a single series out of normalized space.
pub fn denormalize_series(s: &TimeSeries, norm: &Normalization) -> TimeSeries {
    apply(s, norm, |v, m, sd| v * sd + m)
}

pub fn normalize_series(s: &TimeSeries, norm: &Normalization) -> TimeSeries {
    apply(s, norm, |v, m, sd| (v - m) / sd)
}

fn apply(s: &TimeSeries, norm: &Normalization, f: impl Fn(f64, f64, f64) -> f64) -> TimeSeries {
    let l = s.horizon();
    let values = s
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / l;
            f(v, norm.mean[c], norm.std[c])
        })
        .collect();
    TimeSeries::from_raw(s.channels(), l, values)
}

/// `sqrt(alpha_bar(t)) * z0 + sqrt(1 - alpha_bar(t)) * eps`.
pub fn forward_noise(
    z0: &TimeSeries,
    t: usize,
    schedule: &Schedule,
    eps: &TimeSeries,
) -> Result<TimeSeries> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    z0.combine(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Parse the CSV layout: one row per time step, one column per channel, samples
/// separated by blank lines. A leading non-numeric row is treated as a header.
pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut samples = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width: Option<usize> = None;
    let mut seen_data = false;

    let flush = |rows: &mut Vec<Vec<f64>>, samples: &mut Vec<TimeSeries>| -> Result<()> {
        if rows.is_empty() {
            return Ok(());
        }
        let k = rows[0].len();
        let l = rows.len();
        let mut values = vec![0.0; k * l];
        for (u, row) in rows.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                values[c * l + u] = *v;
            }
        }
        samples.push(TimeSeries::new(k, l, values)?);
        rows.clear();
        Ok(())
    };

    for (line_no, line) in text.lines().enumerate() {
        let row_no = line_no + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            flush(&mut rows, &mut samples)?;
            continue;
        }
        let cells: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if !seen_data && cells.iter().all(|c| c.parse::<f64>().is_err()) {
            // header
            width = Some(cells.len());
            seen_data = true;
            continue;
        }
        seen_data = true;
        let mut row = Vec::with_capacity(cells.len());
        for (col, cell) in cells.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| CpsError::Parse {
                row: row_no,
                column: col + 1,
                message: format!("not a number: {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(CpsError::Parse {
                    row: row_no,
                    column: col + 1,
                    message: format!("non-finite value {cell:?}"),
                });
            }
            row.push(v);
        }
        match width {
            Some(w) if w != row.len() => {
                return Err(CpsError::Parse {
                    row: row_no,
                    column: row.len().min(w) + 1,
                    message: format!("expected {w} columns, found {}", row.len()),
                })
            }
            None => width = Some(row.len()),
            _ => {}
        }
        rows.push(row);
    }
    flush(&mut rows, &mut samples)?;
    if samples.is_empty() {
        return Err(CpsError::EmptyDataset);
    }
    let shape = samples[0].shape();
    for (i, s) in samples.iter().enumerate() {
        if s.shape() != shape {
            return Err(CpsError::invalid(format!(
                "sample {} has shape {:?}, expected {:?}",
                i + 1,
                s.shape(),
                shape
            )));
        }
    }
    Dataset::new(samples)
}

/// Render a dataset in the CSV layout. Values use the shortest representation
/// that parses back to the identical `f64`.
pub fn format_csv(ds: &Dataset) -> String {
    let (k, l) = ds.shape();
    let mut out = String::new();
    let header: Vec<String> = (0..k).map(|c| format!("ch{c}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for (i, s) in ds.samples().iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for u in 0..l {
            for c in 0..k {
                if c > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{:?}", s.get(c, u));
            }
            out.push('\n');
        }
    }
    out
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text)
}

pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, format_csv(ds))?;
    Ok(())
}

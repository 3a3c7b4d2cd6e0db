//! Reference learned denoiser: a fully connected SiLU network on the flattened
//! sample concatenated with a sinusoidal step embedding, trained with Adam on
//! the noise-prediction objective. Backpropagation is written out by hand.

use std::path::Path;

use nalgebra::{DMatrix, DMatrixView};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_input, Denoiser};
use crate::rng::{self, Purpose};
use crate::schedule::Schedule;
use crate::series::{Dataset, Normalization, TimeSeries};
use crate::{CpsError, Result};

const FORMAT: &str = "cps-mlp";
const VERSION: u32 = 1;
/// Columns per parallel gradient chunk. Fixed so results don't depend on the thread count.
const CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Record the loss every this many iterations.
    pub log_every: usize,
    /// Exponential smoothing factor for the logged loss.
    pub smoothing: f64,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub embedding_dim: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 64,
            learning_rate: 1e-4,
            seed: 0,
            log_every: 50,
            smoothing: 0.98,
            hidden_width: 256,
            hidden_layers: 3,
            embedding_dim: 64,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size >= 1
            && self.learning_rate > 0.0
            && self.log_every >= 1
            && (0.0..1.0).contains(&self.smoothing)
            && self.hidden_width >= 1
            && self.hidden_layers >= 1
            && self.embedding_dim >= 2
            && self.embedding_dim.is_multiple_of(2)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(CpsError::invalid(
                "training config: need batch_size >= 1, learning_rate > 0, log_every >= 1, smoothing and betas in [0, 1), \
                 positive width/layers, an even embedding_dim >= 2 and adam_epsilon > 0",
            ))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerShape {
    rows: usize,
    cols: usize,
}

impl LayerShape {
    fn size(&self) -> usize {
        self.rows * self.cols + self.rows
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearnedDenoiser {
    channels: usize,
    horizon: usize,
    embedding_dim: usize,
    layers: Vec<LayerShape>,
    params: Vec<f64>,
    schedule: Schedule,
    normalization: Option<Normalization>,
    adam: Adam,
    iteration: usize,
    smoothed_loss: Option<f64>,
}

/// Noisy inputs and their target noise, one column per example.
pub(crate) struct Batch {
    inputs: DMatrix<f64>,
    targets: DMatrix<f64>,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_prime(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

impl LearnedDenoiser {
    /// Fresh network with weights drawn from `N(0, 1/fan_in)` and zero biases.
    pub fn new(channels: usize, horizon: usize, schedule: Schedule, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if channels == 0 || horizon == 0 {
            return Err(CpsError::invalid("denoiser needs at least one channel and one step"));
        }
        let n = channels * horizon;
        let mut layers = Vec::with_capacity(cfg.hidden_layers + 1);
        let mut cols = n + cfg.embedding_dim;
        for _ in 0..cfg.hidden_layers {
            layers.push(LayerShape {
                rows: cfg.hidden_width,
                cols,
            });
            cols = cfg.hidden_width;
        }
        layers.push(LayerShape { rows: n, cols });
        let total: usize = layers.iter().map(LayerShape::size).sum();
        let mut params = Vec::with_capacity(total);
        let mut r = rng::stream(cfg.seed, 0, Purpose::Init, 0);
        for layer in &layers {
            let scale = (1.0 / layer.cols as f64).sqrt();
            params.extend(rng::normals(&mut r, layer.rows * layer.cols).into_iter().map(|v| v * scale));
            params.extend(std::iter::repeat_n(0.0, layer.rows));
        }
        log::info!("learned denoiser with {total} parameters");
        Ok(Self {
            channels,
            horizon,
            embedding_dim: cfg.embedding_dim,
            layers,
            adam: Adam {
                m: vec![0.0; total],
                v: vec![0.0; total],
                steps: 0,
            },
            params,
            schedule,
            normalization: None,
            iteration: 0,
            smoothed_loss: None,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    /// Completed training iterations.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    pub fn smoothed_loss(&self) -> Option<f64> {
        self.smoothed_loss
    }

    fn embedding(&self, t: usize, out: &mut [f64]) {
        let half = self.embedding_dim / 2;
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let a = t as f64 * freq;
            out[i] = a.sin();
            out[half + i] = a.cos();
        }
    }

    fn input_column(&self, z: &[f64], t: usize, col: &mut [f64]) {
        let n = z.len();
        col[..n].copy_from_slice(z);
        self.embedding(t, &mut col[n..]);
    }

    fn weights<'a>(&self, params: &'a [f64], offset: usize, layer: LayerShape) -> (DMatrixView<'a, f64>, &'a [f64]) {
        let w = DMatrixView::from_slice(&params[offset..offset + layer.rows * layer.cols], layer.rows, layer.cols);
        let b = &params[offset + layer.rows * layer.cols..offset + layer.size()];
        (w, b)
    }

    /// Returns the layer inputs (post-activation) and hidden pre-activations.
    fn forward(&self, params: &[f64], x: DMatrix<f64>) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, DMatrix<f64>) {
        let mut acts = vec![x];
        let mut pres = Vec::with_capacity(self.layers.len() - 1);
        let mut offset = 0;
        let last = self.layers.len() - 1;
        let mut out = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = self.weights(params, offset, *layer);
            offset += layer.size();
            let mut pre = w * acts.last().expect("input present");
            for mut col in pre.column_iter_mut() {
                for (v, bias) in col.iter_mut().zip(b) {
                    *v += bias;
                }
            }
            if i == last {
                out = Some(pre);
            } else {
                acts.push(pre.map(silu));
                pres.push(pre);
            }
        }
        (acts, pres, out.expect("output layer present"))
    }

    /// Sum of squared errors over the batch and the parameter gradient of
    /// `scale * sum`.
    fn chunk_grad(&self, params: &[f64], batch: &Batch, scale: f64) -> (f64, Vec<f64>) {
        let (acts, pres, out) = self.forward(params, batch.inputs.clone());
        let diff = out - &batch.targets;
        let sse = diff.norm_squared();
        let mut grad = vec![0.0; params.len()];
        let mut delta = diff * (2.0 * scale);
        let offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |acc, l| {
                let o = *acc;
                *acc += l.size();
                Some(o)
            })
            .collect();
        for i in (0..self.layers.len()).rev() {
            let layer = self.layers[i];
            let off = offsets[i];
            let gw = &delta * acts[i].transpose();
            grad[off..off + layer.rows * layer.cols].copy_from_slice(gw.as_slice());
            for (r, g) in grad[off + layer.rows * layer.cols..off + layer.size()].iter_mut().enumerate() {
                *g = delta.row(r).sum();
            }
            if i > 0 {
                let (w, _) = self.weights(params, off, layer);
                let mut back = w.transpose() * &delta;
                back.zip_apply(&pres[i - 1], |d, p| *d *= silu_prime(p));
                delta = back;
            }
        }
        (sse, grad)
    }

    /// Mean squared error per element and its gradient, computed over fixed
    /// column chunks in parallel and summed in chunk order.
    pub(crate) fn loss_and_grad(&self, params: &[f64], batch: &Batch) -> (f64, Vec<f64>) {
        let cols = batch.inputs.ncols();
        let scale = 1.0 / (cols * self.channels * self.horizon) as f64;
        let starts: Vec<usize> = (0..cols).step_by(CHUNK).collect();
        let parts: Vec<(f64, Vec<f64>)> = starts
            .par_iter()
            .map(|&s| {
                let w = CHUNK.min(cols - s);
                let chunk = Batch {
                    inputs: batch.inputs.columns(s, w).into_owned(),
                    targets: batch.targets.columns(s, w).into_owned(),
                };
                self.chunk_grad(params, &chunk, scale)
            })
            .collect();
        let mut total = 0.0;
        let mut grad = vec![0.0; params.len()];
        for (sse, g) in parts {
            total += sse;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        (total * scale, grad)
    }

    pub(crate) fn loss(&self, params: &[f64], batch: &Batch) -> f64 {
        let (_, _, out) = self.forward(params, batch.inputs.clone());
        let n = (batch.inputs.ncols() * self.channels * self.horizon) as f64;
        (out - &batch.targets).norm_squared() / n
    }

    /// Training loss and its gradient on the batch that `iteration` would draw.
    pub fn batch_loss_and_grad(&self, ds: &Dataset, iteration: usize, cfg: &TrainConfig) -> (f64, Vec<f64>) {
        let batch = self.draw_batch(ds, iteration, cfg);
        self.loss_and_grad(&self.params, &batch)
    }

    /// Training loss on the same batch with substitute parameters.
    pub fn batch_loss_with(&self, params: &[f64], ds: &Dataset, iteration: usize, cfg: &TrainConfig) -> f64 {
        let batch = self.draw_batch(ds, iteration, cfg);
        self.loss(params, &batch)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Draw the training batch for `iteration` from its own random stream.
    pub(crate) fn draw_batch(&self, ds: &Dataset, iteration: usize, cfg: &TrainConfig) -> Batch {
        let n = self.channels * self.horizon;
        let rows = n + self.embedding_dim;
        let mut r = rng::stream(cfg.seed, iteration as u64, Purpose::Training, 0);
        let mut inputs = DMatrix::zeros(rows, cfg.batch_size);
        let mut targets = DMatrix::zeros(n, cfg.batch_size);
        let mut zt = vec![0.0; n];
        for b in 0..cfg.batch_size {
            let x0 = ds.samples()[r.random_range(0..ds.len())].as_slice();
            let t = r.random_range(1..=self.schedule.steps());
            let eps = rng::normals(&mut r, n);
            let ab = self.schedule.alpha_bar(t);
            let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
            for i in 0..n {
                zt[i] = sa * x0[i] + sn * eps[i];
            }
            self.input_column(&zt, t, inputs.column_mut(b).as_mut_slice());
            targets.column_mut(b).copy_from_slice(&eps);
        }
        Batch { inputs, targets }
    }

    fn adam_step(&mut self, grad: &[f64], cfg: &TrainConfig) {
        let a = &mut self.adam;
        a.steps += 1;
        let c1 = 1.0 - cfg.beta1.powi(a.steps as i32);
        let c2 = 1.0 - cfg.beta2.powi(a.steps as i32);
        for (i, &g) in grad.iter().enumerate() {
            a.m[i] = cfg.beta1 * a.m[i] + (1.0 - cfg.beta1) * g;
            a.v[i] = cfg.beta2 * a.v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = a.m[i] / c1;
            let vh = a.v[i] / c2;
            self.params[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_epsilon);
        }
    }

    // -- checkpoints ------------------------------------------------------

    pub fn to_json(&self) -> String {
        let ck = Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            channels: self.channels,
            horizon: self.horizon,
            embedding_dim: self.embedding_dim,
            layers: self.layers.clone(),
            parameter_count: self.params.len(),
            schedule: self.schedule.clone(),
            normalization: self.normalization.clone(),
            iteration: self.iteration,
            smoothed_loss: self.smoothed_loss,
            params: self.params.clone(),
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
            adam_steps: self.adam.steps,
        };
        serde_json::to_string(&ck).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| CpsError::Checkpoint(format!("unreadable checkpoint: {e}")))?;
        ck.into_model()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl Denoiser for LearnedDenoiser {
    fn shape(&self) -> (usize, usize) {
        (self.channels, self.horizon)
    }

    fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    fn predict_noise(&self, z: &TimeSeries, t: usize) -> Result<TimeSeries> {
        check_input(self, z, t)?;
        let mut x = DMatrix::zeros(z.len() + self.embedding_dim, 1);
        self.input_column(z.as_slice(), t, x.as_mut_slice());
        let (_, _, out) = self.forward(&self.params, x);
        TimeSeries::new(self.channels, self.horizon, out.as_slice().to_vec())
            .map_err(|_| CpsError::numerical(Some(t), "denoiser produced a non-finite noise estimate"))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    channels: usize,
    horizon: usize,
    embedding_dim: usize,
    layers: Vec<LayerShape>,
    parameter_count: usize,
    schedule: Schedule,
    normalization: Option<Normalization>,
    iteration: usize,
    smoothed_loss: Option<f64>,
    params: Vec<f64>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    adam_steps: u64,
}

impl Checkpoint {
    fn into_model(self) -> Result<LearnedDenoiser> {
        let bad = |m: &str| Err(CpsError::Checkpoint(m.to_string()));
        if self.format != FORMAT {
            return bad("not a denoiser checkpoint");
        }
        if self.version != VERSION {
            return Err(CpsError::Checkpoint(format!(
                "checkpoint version {} not supported (expected {VERSION})",
                self.version
            )));
        }
        let n = self.channels * self.horizon;
        if n == 0 || self.layers.is_empty() {
            return bad("empty shape manifest");
        }
        let mut cols = n + self.embedding_dim;
        for l in &self.layers {
            if l.cols != cols || l.rows == 0 {
                return bad("layer shapes do not chain");
            }
            cols = l.rows;
        }
        if cols != n {
            return bad("output layer does not match the sample shape");
        }
        let total: usize = self.layers.iter().map(LayerShape::size).sum();
        if self.parameter_count != total
            || self.params.len() != total
            || self.adam_m.len() != total
            || self.adam_v.len() != total
        {
            return bad("parameter count does not match the shape manifest");
        }
        if !self.params.iter().chain(&self.adam_m).chain(&self.adam_v).all(|v| v.is_finite()) {
            return bad("non-finite parameter");
        }
        if !self.embedding_dim.is_multiple_of(2) {
            return bad("odd embedding dimension");
        }
        self.schedule
            .validate()
            .map_err(|e| CpsError::Checkpoint(format!("schedule: {e}")))?;
        if let Some(norm) = &self.normalization {
            if norm.mean.len() != self.channels || norm.std.len() != self.channels {
                return bad("normalization record has wrong channel count");
            }
        }
        Ok(LearnedDenoiser {
            channels: self.channels,
            horizon: self.horizon,
            embedding_dim: self.embedding_dim,
            layers: self.layers,
            params: self.params,
            schedule: self.schedule,
            normalization: self.normalization,
            adam: Adam {
                m: self.adam_m,
                v: self.adam_v,
                steps: self.adam_steps,
            },
            iteration: self.iteration,
            smoothed_loss: self.smoothed_loss,
        })
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub loss: f64,
    pub smoothed: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss,smoothed\n");
        for r in &self.records {
            s.push_str(&format!("{},{:?},{:?}\n", r.iteration, r.loss, r.smoothed));
        }
        s
    }

    pub fn first(&self) -> Option<&TrainRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&TrainRecord> {
        self.records.last()
    }
}

/// Train a fresh network for `cfg.iterations` steps.
pub fn train(ds: &Dataset, schedule: &Schedule, cfg: &TrainConfig) -> Result<(LearnedDenoiser, TrainLog)> {
    let (k, l) = ds.shape();
    let mut model = LearnedDenoiser::new(k, l, schedule.clone(), cfg)?;
    model.normalization = ds.normalization().cloned();
    let log = train_from(&mut model, ds, cfg, cfg.iterations)?;
    Ok((model, log))
}

/// Continue training for `iterations` more steps. The network architecture is
/// taken from `model`; its size fields in `cfg` are ignored.
pub fn train_from(model: &mut LearnedDenoiser, ds: &Dataset, cfg: &TrainConfig, iterations: usize) -> Result<TrainLog> {
    cfg.validate()?;
    ds.samples()[0].check_shape(model.shape())?;
    if model.normalization.is_none() {
        model.normalization = ds.normalization().cloned();
    }
    let mut log = TrainLog::default();
    let end = model.iteration + iterations;
    while model.iteration < end {
        let it = model.iteration;
        let batch = model.draw_batch(ds, it, cfg);
        let (loss, grad) = model.loss_and_grad(&model.params, &batch);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(CpsError::Diverged {
                iteration: it,
                last_finite: Box::new(model.clone()),
            });
        }
        model.adam_step(&grad, cfg);
        model.iteration += 1;
        let smoothed = match model.smoothed_loss {
            Some(s) => cfg.smoothing * s + (1.0 - cfg.smoothing) * loss,
            None => loss,
        };
        model.smoothed_loss = Some(smoothed);
        if it.is_multiple_of(cfg.log_every) || model.iteration == end {
            log::debug!("iteration {it}: loss {loss:.6} (smoothed {smoothed:.6})");
            log.records.push(TrainRecord {
                iteration: it,
                loss,
                smoothed,
            });
        }
    }
    Ok(log)
}

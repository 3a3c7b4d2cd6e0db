//! Constrained posterior sampling for diffusion-based time-series generation.
//!
//! The crate is organised bottom-up:
//!
//! - [`schedule`]: noise coefficients, DDIM control parameters and penalty coefficients.
//! - [`series`]: the `K x L` sample type, datasets, waveform generation and CSV I/O.
//! - [`constraints`]: constraint descriptors, the violation function and affine compilation.
//! - [`projection`]: the proximity-plus-penalty projection of a posterior mean estimate.
//! - [`denoiser`]: noise predictors (closed-form Gaussian and a small learned MLP).
//! - [`sampler`]: DDIM, constrained posterior sampling and the comparison baselines.
//! - [`analysis`]: numerical verification of the convergence bound in the Gaussian/linear setting.
//! - [`metrics`]: DTW, 1-D SSIM, violation statistics and a feature Fréchet distance.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod analysis;
pub mod constraints;
pub mod denoiser;
mod error;
pub mod metrics;
pub mod projection;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod series;

pub use constraints::{AffineSystem, Constraint, ConstraintKind, ConstraintSet, RowKind};
pub use denoiser::{Denoiser, GaussianDenoiser, LearnedDenoiser, TrainConfig};
pub use error::{CpsError, Result};
pub use projection::{ProjectionConfig, ProjectionResult, Projector};
pub use sampler::{SampleReport, SamplerConfig};
pub use schedule::{Schedule, ScheduleConfig};
pub use series::{Dataset, Normalization, TimeSeries};

use thiserror::Error;

use crate::denoiser::LearnedDenoiser;

pub type Result<T> = std::result::Result<T, CpsError>;

#[derive(Debug, Error)]
pub enum CpsError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("step {t} outside 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },

    #[error("shape mismatch: expected {expected:?} (channels, horizon), got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("channel {channel} is constant; cannot normalize")]
    ConstantChannel { channel: usize },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("posterior mean undefined at step {t}: alpha_bar is zero")]
    TerminalNoise { t: usize },

    #[error("constraint {index} ({kind}) is not affine: {reason}")]
    NonAffine {
        index: usize,
        kind: &'static str,
        reason: String,
    },

    #[error("numerical failure{}: {message}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Numerical { step: Option<usize>, message: String },

    #[error("training diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        last_finite: Box<LearnedDenoiser>,
    },

    #[error("rank-deficient system: {0}")]
    RankDeficient(String),

    #[error("assertion failed: {0}")]
    Assertion(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CpsError {
    pub(crate) fn numerical(step: Option<usize>, message: impl Into<String>) -> Self {
        CpsError::Numerical {
            step,
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        CpsError::InvalidParameter(message.into())
    }
}

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("unknown preset `{0}` (expected one of Default, BigBubble, NoBubble, FearExo, LowImpact)")]
    UnknownPreset(String),

    #[error("trading rate {rate} outside the admissible interval [{lo}, {hi}]")]
    RateOutOfBounds { rate: f64, lo: f64, hi: f64 },

    #[error("regression failed at step {step}: {reason}")]
    Regression { step: usize, reason: String },

    #[error("failed to parse scenario file {path}: {reason}")]
    Config { path: PathBuf, reason: String },

    #[error("bundle cache: {0}")]
    Cache(String),

    #[error("ODE integration failed: {0}")]
    Ode(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

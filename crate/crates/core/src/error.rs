use thiserror::Error;

use crate::socp::SolveStatus;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("incomplete trace: {got} samples, need {need}")]
    IncompleteTrace { got: usize, need: usize },

    #[error("covariance rank deficient: {samples} samples for {steps} steps")]
    RankDeficient { samples: usize, steps: usize },

    #[error("not enough samples: {got}, need at least {need}")]
    TooFewSamples { got: usize, need: usize },

    #[error("empty scenario set")]
    EmptySet,

    #[error("FCR consumes full battery at step {step}")]
    FcrConsumesBattery { step: usize },

    #[error("solver returned {status:?}: {detail}")]
    Solver { status: SolveStatus, detail: String },

    #[error("linear algebra failure: {0}")]
    Numerical(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

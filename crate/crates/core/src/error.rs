use std::io;

use thiserror::Error;

use crate::trajectory::TrajId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid trajectory {id}: {reason}")]
    InvalidTrajectory { id: TrajId, reason: String },

    #[error("infeasible dataset spec: {0}")]
    InfeasibleSpec(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("channel arity mismatch: {left} vs {right}")]
    ArityMismatch { left: usize, right: usize },

    #[error("dtw failed for pair ({i}, {j}): {source}")]
    PairDistance {
        i: usize,
        j: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("bandwidth bisection did not converge for row {row} (perplexity {achieved:.6} vs target {target:.6})")]
    BisectionFailed {
        row: usize,
        achieved: f64,
        target: f64,
    },

    #[error("KL divergence became non-finite at iteration {iteration}")]
    DivergedKl { iteration: usize },

    #[error("non-finite training loss ({loss}); parameter norms: {norms}")]
    NonFiniteLoss { loss: f64, norms: String },

    #[error("training diverged at epoch {epoch} (loss {loss:e})")]
    Diverged { epoch: usize, loss: f64, trace: Vec<f64> },

    #[error("classifier training requires at least two classes, got {0}")]
    SingleClass(usize),

    #[error("dimension mismatch: model expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("budget {budget} exceeds unlabeled pool size {unlabeled}")]
    BudgetTooLarge { budget: usize, unlabeled: usize },

    #[error("session error: {0}")]
    Session(String),

    #[error("journal error: {0}")]
    Journal(String),

    #[error("unknown trajectory id {0}")]
    UnknownId(TrajId),

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

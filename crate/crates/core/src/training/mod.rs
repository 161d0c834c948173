//! The two learning objectives and their training loops, plus numeric
//! verification utilities.
//!
//! Task training maximizes the likelihood of the target-word span given the
//! masked conversation; dialect training pulls the dialect-side mask
//! representation toward the frozen reference-side one with a cosine embedding
//! loss. Both loops run on the reference decoder, deterministic in their
//! seeds.

mod batch;
mod dialect;
mod gradcheck;
mod loss;
mod metrics;
mod optimizer;
mod task;

use thiserror::Error;

use crate::adapters::{AdapterError, AdapterKind};
use crate::corpus::CorpusError;
use crate::lm::LmError;

pub use batch::{assemble_batch, prepare_examples, BatchExample, TrainBatch, TrainExample};
pub use dialect::{prepare_pairs, train_dialect, DialectTrainConfig, PairExample};
pub use gradcheck::{gradcheck, GradCheckReport};
pub use loss::{dialect_loss, dialect_loss_grad, task_loss, task_loss_grads};
pub use metrics::{write_metrics_jsonl, EpochMetric};
pub use optimizer::{AdamW, AdamWConfig};
pub use task::{train_task, TaskTrainConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("no {0} adapter set is installed on the backend")]
    MissingSet(AdapterKind),
    #[error("the {0} adapter set must be trainable for this stage")]
    SetMustBeTrainable(AdapterKind),
    #[error("the {0} adapter set must be frozen for this stage")]
    SetMustBeFrozen(AdapterKind),
    #[error("dialect training runs without a task set, but one is installed")]
    TaskSetActive,
    #[error("pair references missing example {id}")]
    MissingExample { id: String },
    #[error("example {id}: target span [{start}, {end}] does not fit a sequence of {len} tokens")]
    SpanOutOfBounds {
        id: String,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("example {id}: empty {what}")]
    EmptyPart { id: String, what: &'static str },
    #[error("logits shape {got} does not match batch sequence of {expected} tokens")]
    LogitsShape { expected: usize, got: String },
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("representation dimensions differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("non-finite value during {0}; aborting")]
    NonFinite(String),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

/// Per-epoch losses and timing from a training run.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub wall_seconds: f64,
}

/// Outcome of a training loop. The backend is left holding the best
/// checkpoint's parameters.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_loss: f64,
}

#[cfg(test)]
mod tests;

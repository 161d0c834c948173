//! The task-adapter training loop: causal-LM MLE over target spans.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::{AdapterKind, StackGrads};
use crate::lm::{Backend, ForwardSelection, TinyDecoder, TokenSequence};

use super::loss::example_span_loss;
use super::{
    assemble_batch, AdamW, AdamWConfig, EpochRecord, TrainError, TrainExample, TrainReport,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Requested optimizer. The reference backend maps the published
    /// "adamw-paged-8bit" onto plain AdamW with the same hyperparameters.
    pub optimizer_id: String,
    pub seed: u64,
    /// Extend each loss span over the end-of-answer token so greedy decoding
    /// learns to stop after the target word.
    pub span_includes_stop: bool,
}

impl Default for TaskTrainConfig {
    fn default() -> Self {
        TaskTrainConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 2e-4,
            weight_decay: 0.0,
            optimizer_id: "adamw-paged-8bit".into(),
            seed: 13,
            span_includes_stop: true,
        }
    }
}

impl TaskTrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs < 1 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(TrainError::Config("learning_rate must be > 0".into()));
        }
        Ok(())
    }

    /// Optimizer actually instantiated by the reference backend.
    pub fn resolved_optimizer(&self) -> &'static str {
        "adamw"
    }
}

/// Trains the task adapter set on `train`, minimizing the span MLE loss.
/// The dialect set, when installed, must be frozen; it shapes the forward
/// pass but receives no updates. Keeps the epoch with the best validation
/// loss (train loss when `valid` is absent) installed on the decoder.
pub fn train_task(
    decoder: &mut TinyDecoder,
    train: &[TrainExample],
    valid: Option<&[TrainExample]>,
    config: &TaskTrainConfig,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    {
        let stack = decoder.stack();
        let task = stack.task().ok_or(TrainError::MissingSet(AdapterKind::Task))?;
        if !task.trainable() {
            return Err(TrainError::SetMustBeTrainable(AdapterKind::Task));
        }
        if let Some(dialect) = stack.dialect() {
            if dialect.trainable() {
                return Err(TrainError::SetMustBeFrozen(AdapterKind::Dialect));
            }
        }
    }
    let end_id = decoder.descriptor().end_token_id;
    let adamw_config = AdamWConfig::with_learning_rate(config.learning_rate, config.weight_decay);
    let mut optimizer = AdamW::new(adamw_config, decoder.stack().task().expect("checked"));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, crate::adapters::AdapterSet)> = None;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let refs: Vec<&TrainExample> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = assemble_batch(&refs, end_id, config.span_includes_stop)?;
            let n = batch.n() as f64;
            let mut grads = StackGrads::for_trainable(decoder.stack());
            let mut batch_loss = 0.0;
            for ex in batch.examples() {
                let tokens = TokenSequence::new(ex.ids.clone());
                let (pass, cache) =
                    decoder.forward_cached(&tokens, ForwardSelection::Active)?;
                let mut d_logits = ndarray::Array2::zeros(pass.logits.dim());
                batch_loss += example_span_loss(&pass.logits, ex, Some(&mut d_logits))?;
                d_logits /= n;
                decoder.backward(&cache, Some(&d_logits), None, &mut grads);
            }
            batch_loss /= n;
            if !batch_loss.is_finite() || !grads.is_finite() {
                return Err(TrainError::NonFinite(format!(
                    "task epoch {epoch}, batch loss {batch_loss}"
                )));
            }
            optimizer.step(decoder.stack_mut().task_mut().expect("checked"), &grads)?;
            loss_sum += batch_loss * n;
        }
        let train_loss = loss_sum / train.len() as f64;
        let valid_loss = match valid {
            Some(v) if !v.is_empty() => Some(dataset_loss(decoder, v, end_id, config)?),
            _ => None,
        };
        let select = valid_loss.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|(_, b, _)| select < *b) {
            best = Some((
                epoch,
                select,
                decoder.stack().task().expect("checked").clone(),
            ));
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    let (best_epoch, best_loss, best_set) = best.expect("at least one epoch ran");
    decoder.stack_mut().install(best_set);
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_loss,
    })
}

/// Mean span loss over a dataset with the current adapters, no updates.
pub(crate) fn dataset_loss(
    decoder: &TinyDecoder,
    examples: &[TrainExample],
    end_id: u32,
    config: &TaskTrainConfig,
) -> Result<f64, TrainError> {
    let refs: Vec<&TrainExample> = examples.iter().collect();
    let batch = assemble_batch(&refs, end_id, config.span_includes_stop)?;
    let mut total = 0.0;
    for ex in batch.examples() {
        let tokens = TokenSequence::new(ex.ids.clone());
        let pass = decoder.forward_selected(&tokens, ForwardSelection::Active)?;
        total += example_span_loss(&pass.logits, ex, None)?;
    }
    Ok(total / batch.n() as f64)
}

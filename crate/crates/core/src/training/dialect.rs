//! The dialect-adapter training loop: contrastive cosine embedding between
//! the frozen reference-side mask representation and the trainable
//! dialect-side one.

use std::collections::HashMap;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::{AdapterKind, StackGrads};
use crate::corpus::{ContrastivePair, MaskedExample, PairLabel, PromptTemplate};
use crate::lm::{Backend, ForwardSelection, TinyDecoder, TokenSequence};

use super::loss::dialect_loss_grad;
use super::{AdamW, AdamWConfig, EpochRecord, TrainError, TrainReport};

#[derive(Debug, Clone, PartialEq)]
pub struct DialectTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Hinge margin for negative pairs.
    pub margin: f64,
    pub seed: u64,
}

impl Default for DialectTrainConfig {
    fn default() -> Self {
        DialectTrainConfig {
            epochs: 10,
            batch_size: 8,
            learning_rate: 2e-5,
            weight_decay: 0.0,
            margin: 0.25,
            seed: 13,
        }
    }
}

impl DialectTrainConfig {
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
        if !(0.0..1.0).contains(&self.margin) {
            return Err(TrainError::Config(format!(
                "margin must lie in [0, 1), got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

/// A tokenized contrastive pair: side `a` is the frozen reference, side `b`
/// the dialect in focus. Both prompts contain exactly one mask token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairExample {
    pub a_id: String,
    pub b_id: String,
    pub a_ids: Vec<u32>,
    pub b_ids: Vec<u32>,
    pub label: PairLabel,
}

/// Resolves pair ids against the two example pools and tokenizes the rendered
/// prompts. A pair naming an id absent from its pool is an error.
pub fn prepare_pairs(
    pairs: &[ContrastivePair],
    a_pool: &[MaskedExample],
    b_pool: &[MaskedExample],
    template: &PromptTemplate,
    backend: &dyn Backend,
) -> Result<Vec<PairExample>, TrainError> {
    let index = |pool: &[MaskedExample]| -> HashMap<String, usize> {
        pool.iter()
            .enumerate()
            .map(|(i, e)| (e.source_id.clone(), i))
            .collect()
    };
    let a_index = index(a_pool);
    let b_index = index(b_pool);
    let mut out = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let a = a_index
            .get(&pair.a_id)
            .map(|&i| &a_pool[i])
            .ok_or_else(|| TrainError::MissingExample {
                id: pair.a_id.clone(),
            })?;
        let b = b_index
            .get(&pair.b_id)
            .map(|&i| &b_pool[i])
            .ok_or_else(|| TrainError::MissingExample {
                id: pair.b_id.clone(),
            })?;
        let a_ids = backend.tokenize(&a.prompt_text(template)?)?.ids().to_vec();
        let b_ids = backend.tokenize(&b.prompt_text(template)?)?.ids().to_vec();
        out.push(PairExample {
            a_id: pair.a_id.clone(),
            b_id: pair.b_id.clone(),
            a_ids,
            b_ids,
            label: pair.label,
        });
    }
    Ok(out)
}

/// Trains the dialect adapter set on contrastive pairs. The reference-side
/// representation comes from the pristine base (every adapter disabled); the
/// dialect side runs with the dialect set active. No task set may be
/// installed during this stage.
pub fn train_dialect(
    decoder: &mut TinyDecoder,
    train: &[PairExample],
    valid: Option<&[PairExample]>,
    config: &DialectTrainConfig,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    {
        let stack = decoder.stack();
        if stack.task().is_some() {
            return Err(TrainError::TaskSetActive);
        }
        let dialect = stack
            .dialect()
            .ok_or(TrainError::MissingSet(AdapterKind::Dialect))?;
        if !dialect.trainable() {
            return Err(TrainError::SetMustBeTrainable(AdapterKind::Dialect));
        }
    }
    let mask_id = decoder.descriptor().mask_token_id;
    // the frozen side never changes during this stage
    let mut frozen_reps: HashMap<&str, Array1<f64>> = HashMap::new();
    for pair in train.iter().chain(valid.into_iter().flatten()) {
        if !frozen_reps.contains_key(pair.a_id.as_str()) {
            let rep = decoder.mask_representation_selected(
                &TokenSequence::new(pair.a_ids.clone()),
                ForwardSelection::BaseOnly,
            )?;
            frozen_reps.insert(pair.a_id.as_str(), rep);
        }
    }

    let adamw_config = AdamWConfig::with_learning_rate(config.learning_rate, config.weight_decay);
    let mut optimizer = AdamW::new(adamw_config, decoder.stack().dialect().expect("checked"));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, crate::adapters::AdapterSet)> = None;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let n = chunk.len() as f64;
            let mut grads = StackGrads::for_trainable(decoder.stack());
            let mut batch_loss = 0.0;
            for &idx in chunk {
                let pair = &train[idx];
                let tokens = TokenSequence::new(pair.b_ids.clone());
                let mask_pos = single_mask_position(&tokens, mask_id)?;
                let (pass, cache) =
                    decoder.forward_cached(&tokens, ForwardSelection::Active)?;
                let rep_x = pass.hidden.row(mask_pos);
                let rep_ref = &frozen_reps[pair.a_id.as_str()];
                let (loss, d_rep) =
                    dialect_loss_grad(rep_ref.view(), rep_x, pair.label, config.margin)?;
                batch_loss += loss;
                let mut d_hidden = Array2::zeros(pass.hidden.dim());
                d_hidden.row_mut(mask_pos).assign(&(&d_rep / n));
                decoder.backward(&cache, None, Some(&d_hidden), &mut grads);
            }
            batch_loss /= n;
            if !batch_loss.is_finite() || !grads.is_finite() {
                return Err(TrainError::NonFinite(format!(
                    "dialect epoch {epoch}, batch loss {batch_loss}"
                )));
            }
            optimizer.step(decoder.stack_mut().dialect_mut().expect("checked"), &grads)?;
            loss_sum += batch_loss * n;
        }
        let train_loss = loss_sum / train.len() as f64;
        let valid_loss = match valid {
            Some(v) if !v.is_empty() => {
                Some(pairs_loss(decoder, v, &frozen_reps, mask_id, config)?)
            }
            _ => None,
        };
        let select = valid_loss.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|(_, b, _)| select < *b) {
            best = Some((
                epoch,
                select,
                decoder.stack().dialect().expect("checked").clone(),
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

fn single_mask_position(tokens: &TokenSequence, mask_id: u32) -> Result<usize, TrainError> {
    let positions = tokens.positions_of(mask_id);
    if positions.len() != 1 {
        return Err(TrainError::Lm(crate::lm::LmError::MaskCount {
            count: positions.len(),
        }));
    }
    Ok(positions[0])
}

fn pairs_loss(
    decoder: &TinyDecoder,
    pairs: &[PairExample],
    frozen_reps: &HashMap<&str, Array1<f64>>,
    mask_id: u32,
    config: &DialectTrainConfig,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for pair in pairs {
        let tokens = TokenSequence::new(pair.b_ids.clone());
        let mask_pos = single_mask_position(&tokens, mask_id)?;
        let pass = decoder.forward_selected(&tokens, ForwardSelection::Active)?;
        let rep_x = pass.hidden.row(mask_pos);
        let rep_ref = &frozen_reps[pair.a_id.as_str()];
        total += super::loss::dialect_loss(rep_ref.view(), rep_x, pair.label, config.margin)?;
    }
    Ok(total / pairs.len() as f64)
}

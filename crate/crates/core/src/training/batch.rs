//! Batch assembly for task training: each sequence is the tokenized prompt,
//! the target word and the end-of-answer token, with a 1-indexed target span
//! marking the positions the loss covers.

use crate::corpus::{MaskedExample, PromptTemplate};
use crate::lm::Backend;

use super::TrainError;

/// One assembled sequence `[x ; t ; end]` with its loss span. `span_start` and
/// `span_end` are 1-indexed inclusive token positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchExample {
    pub id: String,
    pub ids: Vec<u32>,
    pub span_start: usize,
    pub span_end: usize,
}

impl BatchExample {
    /// 1-indexed token positions the loss sums over.
    pub fn loss_positions(&self) -> impl Iterator<Item = usize> {
        self.span_start..=self.span_end
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.span_start < 2 || self.span_start > self.span_end || self.span_end > self.ids.len()
        {
            return Err(TrainError::SpanOutOfBounds {
                id: self.id.clone(),
                start: self.span_start,
                end: self.span_end,
                len: self.ids.len(),
            });
        }
        Ok(())
    }
}

/// A validated batch of sequences. Sequences keep their natural lengths; loss
/// spans never cover positions outside them.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    examples: Vec<BatchExample>,
}

impl TrainBatch {
    pub fn new(examples: Vec<BatchExample>) -> Result<Self, TrainError> {
        if examples.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        for ex in &examples {
            ex.validate()?;
        }
        Ok(TrainBatch { examples })
    }

    pub fn n(&self) -> usize {
        self.examples.len()
    }

    pub fn examples(&self) -> &[BatchExample] {
        &self.examples
    }
}

/// A pre-tokenized training instance: prompt tokens (the `x` of the loss) and
/// target tokens (the `t`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub id: String,
    pub prompt_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
}

/// Renders and tokenizes masked examples for training.
pub fn prepare_examples(
    examples: &[MaskedExample],
    template: &PromptTemplate,
    backend: &dyn Backend,
) -> Result<Vec<TrainExample>, TrainError> {
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        let prompt = ex.prompt_text(template)?;
        let prompt_ids = backend.tokenize(&prompt)?.ids().to_vec();
        let target_ids = backend.tokenize(&ex.target_word)?.ids().to_vec();
        if prompt_ids.is_empty() {
            return Err(TrainError::EmptyPart {
                id: ex.source_id.clone(),
                what: "prompt",
            });
        }
        if target_ids.is_empty() {
            return Err(TrainError::EmptyPart {
                id: ex.source_id.clone(),
                what: "target",
            });
        }
        out.push(TrainExample {
            id: ex.source_id.clone(),
            prompt_ids,
            target_ids,
        });
    }
    Ok(out)
}

/// Concatenates `[x ; t ; end]` per example. The span covers the target
/// tokens; with `span_includes_stop` it extends over the end token as well so
/// the model also learns to terminate.
pub fn assemble_batch(
    examples: &[&TrainExample],
    end_id: u32,
    span_includes_stop: bool,
) -> Result<TrainBatch, TrainError> {
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        let x_len = ex.prompt_ids.len();
        let t_len = ex.target_ids.len();
        let mut ids = Vec::with_capacity(x_len + t_len + 1);
        ids.extend_from_slice(&ex.prompt_ids);
        ids.extend_from_slice(&ex.target_ids);
        ids.push(end_id);
        let span_end = x_len + t_len + usize::from(span_includes_stop);
        out.push(BatchExample {
            id: ex.id.clone(),
            ids,
            span_start: x_len + 1,
            span_end,
        });
    }
    TrainBatch::new(out)
}

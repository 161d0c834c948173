//! Backend contract for decoder-only language models, plus a tiny
//! deterministic reference decoder used for desk-scale training and tests.

mod decoder;
pub mod tensor_io;
mod tokenizer;

use std::collections::HashSet;
use std::path::PathBuf;

use ndarray::{Array1, Array2};
use thiserror::Error;

pub use decoder::{DecoderParams, ForwardSelection, TinyDecoder, TinyDecoderConfig};
pub use tokenizer::CharTokenizer;

/// The mask atom; tokenizes to a single reserved id.
pub const MASK_TOKEN: &str = "[MASK]";
/// The end-of-answer atom that terminates greedy generation.
pub const END_TOKEN: &str = "[EOA]";

#[derive(Debug, Error)]
pub enum LmError {
    #[error("character {ch:?} at byte {index} is outside the backend alphabet")]
    UnsupportedChar { ch: char, index: usize },
    #[error("token id {id} is outside the vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("input of {len} tokens exceeds the context length {context_len}")]
    ContextOverflow { len: usize, context_len: usize },
    #[error("model input must contain at least one token")]
    EmptyInput,
    #[error("expected exactly one {MASK_TOKEN} token, found {count}")]
    MaskCount { count: usize },
    #[error("max_new must be at least 1")]
    ZeroMaxNew,
    #[error("invalid decoder config: {0}")]
    Config(String),
    #[error("tensor io on {path}: {message}")]
    TensorIo { path: PathBuf, message: String },
    #[error("weights manifest: {0}")]
    Manifest(String),
}

/// An immutable sequence of token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSequence { ids }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: u32) {
        self.ids.push(id);
    }

    /// Positions of `id` within the sequence.
    pub fn positions_of(&self, id: u32) -> Vec<usize> {
        self.ids
            .iter()
            .enumerate()
            .filter_map(|(i, &t)| (t == id).then_some(i))
            .collect()
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(ids: Vec<u32>) -> Self {
        TokenSequence::new(ids)
    }
}

/// Shape of one adapter-injectable linear layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearSpec {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Static description of a backend: vocabulary, width and the ordered set of
/// linear layers adapters can attach to.
#[derive(Debug, Clone)]
pub struct BackendDescriptor {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub context_len: usize,
    pub linear_layers: Vec<LinearSpec>,
    pub mask_token_id: u32,
    pub end_token_id: u32,
}

impl BackendDescriptor {
    pub fn linear_layer_names(&self) -> Vec<&str> {
        self.linear_layers.iter().map(|l| l.name.as_str()).collect()
    }

    pub fn linear(&self, name: &str) -> Option<&LinearSpec> {
        self.linear_layers.iter().find(|l| l.name == name)
    }

    pub fn validate(&self) -> Result<(), LmError> {
        let mut seen = HashSet::new();
        for layer in &self.linear_layers {
            if !seen.insert(layer.name.as_str()) {
                return Err(LmError::Config(format!(
                    "duplicate linear layer name {:?}",
                    layer.name
                )));
            }
        }
        if self.mask_token_id as usize >= self.vocab_size {
            return Err(LmError::Config("mask token id outside vocabulary".into()));
        }
        Ok(())
    }
}

/// Logits and final-layer hidden states for an input sequence. Row `i` of
/// `logits` is the next-token distribution after reading tokens `0..=i`.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Array2<f64>,
    pub hidden: Array2<f64>,
}

/// Outcome of greedy decoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub text: String,
    pub token_ids: Vec<u32>,
    /// Set when the context filled up before a stop token or `max_new`.
    pub truncated: bool,
}

/// The inference contract shared by the reference decoder and any real
/// pretrained backend mounted behind it.
pub trait Backend {
    fn descriptor(&self) -> &BackendDescriptor;

    fn tokenize(&self, text: &str) -> Result<TokenSequence, LmError>;

    fn detokenize(&self, tokens: &TokenSequence) -> String;

    fn forward(&self, tokens: &TokenSequence) -> Result<ForwardPass, LmError>;

    /// Final-layer hidden state at the position of the single mask token,
    /// under whatever adapters are currently active.
    fn mask_representation(&self, tokens: &TokenSequence) -> Result<Array1<f64>, LmError> {
        let positions = tokens.positions_of(self.descriptor().mask_token_id);
        if positions.len() != 1 {
            return Err(LmError::MaskCount {
                count: positions.len(),
            });
        }
        let pass = self.forward(tokens)?;
        Ok(pass.hidden.row(positions[0]).to_owned())
    }

    /// Greedy decoding: repeatedly append the argmax token (ties broken by
    /// lowest id) until a stop token, `max_new` tokens, or a full context.
    /// The stop token is excluded from the returned continuation.
    fn generate_greedy(
        &self,
        prompt: &TokenSequence,
        max_new: usize,
        stop: &HashSet<u32>,
    ) -> Result<Generation, LmError> {
        if max_new == 0 {
            return Err(LmError::ZeroMaxNew);
        }
        let context_len = self.descriptor().context_len;
        let mut ids = prompt.clone();
        let mut emitted = Vec::new();
        let mut truncated = false;
        for _ in 0..max_new {
            if ids.len() >= context_len {
                truncated = true;
                break;
            }
            let pass = self.forward(&ids)?;
            let row = pass.logits.row(ids.len() - 1);
            let next = argmax_lowest_id(row.as_slice().expect("contiguous row"));
            if stop.contains(&next) {
                break;
            }
            ids.push(next);
            emitted.push(next);
        }
        let text = self.detokenize(&TokenSequence::new(emitted.clone()));
        Ok(Generation {
            text,
            token_ids: emitted,
            truncated,
        })
    }
}

/// Index of the largest value; the lowest index wins ties, making greedy
/// decoding total and reproducible.
pub fn argmax_lowest_id(values: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best as u32
}

//! Target-word-prediction inference, the two evaluation metrics, and report
//! generation with improvement/degradation annotations.

mod embedder;
mod report;

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, MaskedExample, PromptTemplate};
use crate::lm::{Backend, LmError};

pub use embedder::{EmbedOutcome, Embedder, TrigramHashEmbedder};
pub use report::{
    build_report, render_text, Annotation, AnnotationKind, AnnotationStatus, BackendScore,
    EvalReport, GroupKey, Metric, PublishedAnnotation, ReportGroup, ReportRow,
    RECONCILE_TOLERANCE,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("no evaluation results to aggregate")]
    EmptyResults,
    #[error("relative difference is undefined for a zero reference")]
    ZeroReference,
    #[error("report references missing key {0}")]
    MissingKey(String),
    #[error("predictions io on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Lm(#[from] LmError),
}

/// Default generation budget for the reference backend's character tokens.
pub const DEFAULT_MAX_NEW: usize = 8;

/// Per-example evaluation record. `similarity` is the raw cosine in [-1, 1];
/// report-level numbers are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub example_id: String,
    pub prediction: String,
    pub reference: String,
    pub correct: bool,
    pub similarity: f64,
    pub flags: Vec<String>,
}

/// Options for a TWP evaluation run.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub max_new: usize,
    /// Embed the normalized strings rather than the raw ones.
    pub embed_normalized: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            max_new: DEFAULT_MAX_NEW,
            embed_normalized: true,
        }
    }
}

/// Outcome of one greedy prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictOutcome {
    pub prediction: String,
    pub flags: Vec<String>,
}

/// Greedy TWP inference: renders the prompt, decodes until the end-of-answer
/// token or `max_new` tokens, and returns the trimmed continuation. Context
/// overflow is recorded as a flag with an empty prediction rather than a hard
/// error, so evaluation runs survive overlong transcripts.
pub fn predict_target(
    backend: &dyn Backend,
    example: &MaskedExample,
    template: &PromptTemplate,
    max_new: usize,
) -> Result<PredictOutcome, EvalError> {
    if max_new == 0 {
        return Err(EvalError::Config("max_new must be >= 1".into()));
    }
    let prompt = example.prompt_text(template)?;
    let tokens = backend.tokenize(&prompt)?;
    let stop = HashSet::from([backend.descriptor().end_token_id]);
    let generation = backend.generate_greedy(&tokens, max_new, &stop)?;
    let mut flags = Vec::new();
    let prediction = if generation.truncated && generation.token_ids.is_empty() {
        flags.push("truncated_prompt".to_string());
        String::new()
    } else {
        if generation.truncated {
            flags.push("truncated_generation".to_string());
        }
        generation.text.trim().to_string()
    };
    if prediction.is_empty() && !flags.iter().any(|f| f == "truncated_prompt") {
        flags.push("empty_prediction".to_string());
    }
    Ok(PredictOutcome { prediction, flags })
}

/// Answer normalization used for the accuracy match: case-fold, trim, strip
/// terminal punctuation, collapse internal whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let stripped = lowered
        .trim()
        .trim_end_matches(['.', ',', '!', '?', '\'', '"']);
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Runs TWP over a set of masked examples and scores each prediction.
pub fn evaluate(
    backend: &dyn Backend,
    examples: &[MaskedExample],
    template: &PromptTemplate,
    embedder: &dyn Embedder,
    options: &EvalOptions,
) -> Result<Vec<EvalResult>, EvalError> {
    let mut results = Vec::with_capacity(examples.len());
    for example in examples {
        let outcome = predict_target(backend, example, template, options.max_new)?;
        let mut flags = outcome.flags;
        let norm_prediction = normalize_answer(&outcome.prediction);
        let norm_reference = normalize_answer(&example.target_word);
        let correct = !norm_reference.is_empty() && norm_prediction == norm_reference;
        let (cosine, fallback) = pair_cosine(
            embedder,
            &outcome.prediction,
            &example.target_word,
            options.embed_normalized,
        );
        if fallback {
            flags.push("embed_fallback".to_string());
        }
        results.push(EvalResult {
            example_id: example.source_id.clone(),
            prediction: outcome.prediction,
            reference: example.target_word.clone(),
            correct,
            similarity: cosine,
            flags,
        });
    }
    Ok(results)
}

fn pair_cosine(
    embedder: &dyn Embedder,
    prediction: &str,
    reference: &str,
    normalized: bool,
) -> (f64, bool) {
    let (p, r) = if normalized {
        (normalize_answer(prediction), normalize_answer(reference))
    } else {
        (prediction.to_string(), reference.to_string())
    };
    let ep = embedder.embed(&p);
    let er = embedder.embed(&r);
    (ep.vector.dot(&er.vector), ep.fallback || er.fallback)
}

/// Percent of results whose normalized prediction equals the normalized
/// reference.
pub fn accuracy(results: &[EvalResult]) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    let correct = results.iter().filter(|r| r.correct).count();
    Ok(100.0 * correct as f64 / results.len() as f64)
}

/// 100 x mean cosine between the embedded prediction and reference.
pub fn similarity(
    results: &[EvalResult],
    embedder: &dyn Embedder,
    embed_normalized: bool,
) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    let sum: f64 = results
        .iter()
        .map(|r| pair_cosine(embedder, &r.prediction, &r.reference, embed_normalized).0)
        .sum();
    Ok(100.0 * sum / results.len() as f64)
}

/// 100 x (value - reference) / reference. Positive values are improvements
/// over the reference; the skyline gap is computed as
/// `relative_difference(skyline, value)`, relative to the method's own score.
pub fn relative_difference(value: f64, reference: f64) -> Result<f64, EvalError> {
    if reference == 0.0 {
        return Err(EvalError::ZeroReference);
    }
    Ok(100.0 * (value - reference) / reference)
}

pub fn write_predictions(path: &Path, results: &[EvalResult]) -> Result<(), EvalError> {
    let io_err = |e: std::io::Error| EvalError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = BufWriter::new(File::create(path).map_err(io_err)?);
    for result in results {
        let line = serde_json::to_string(result).expect("result serializes");
        writer.write_all(line.as_bytes()).map_err(io_err)?;
        writer.write_all(b"\n").map_err(io_err)?;
    }
    writer.flush().map_err(io_err)
}

pub fn read_predictions(path: &Path) -> Result<Vec<EvalResult>, EvalError> {
    let io_err = |e: std::io::Error| EvalError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;

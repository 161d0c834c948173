//! Word-game conversation corpus: loading, masking, augmentation and
//! pseudo-parallel pair construction.
//!
//! A conversation is a transcript of a taboo-style guessing game. The guesser's
//! first winning utterance is replaced with `[MASK]` and everything after it is
//! pruned, yielding a target-word-prediction instance.

pub mod fixtures;
mod matcher;
mod template;

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use matcher::{normalize_target, utters_target};
pub use template::{render_prompt, PromptTemplate};

/// The token that replaces the guesser's winning utterance.
pub const MASK_TOKEN: &str = "[MASK]";

/// Errors from corpus loading, masking and pair construction.
#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("conversation {id}: {message}")]
    Validation { id: String, message: String },
    #[error("conversation {id} is not maskable: target {target:?} is never uttered by the guesser")]
    Unmaskable { id: String, target: String },
    #[error("masked example {id}: {message}")]
    InvalidMasked { id: String, message: String },
    #[error("us_fraction {0} is outside [0, 1]")]
    FractionOutOfRange(f64),
    #[error("pair construction: side {0} is empty")]
    EmptySide(&'static str),
    #[error("pair {a_id} / {b_id}: both sides carry dialect {dialect}")]
    SameDialectPair {
        a_id: String,
        b_id: String,
        dialect: Dialect,
    },
    #[error("prompt template is missing the {placeholder} placeholder", placeholder = PromptTemplate::PLACEHOLDER)]
    MissingPlaceholder,
    #[error("rendered prompt contains {count} occurrences of {MASK_TOKEN}, expected exactly one")]
    BadMaskCount { count: usize },
    #[error("unknown dialect tag {0:?}")]
    UnknownDialect(String),
}

/// English variety tags used across the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dialect {
    #[serde(rename = "en-US")]
    EnUs,
    #[serde(rename = "en-IN")]
    EnIn,
    #[serde(rename = "en-NG")]
    EnNg,
    #[serde(rename = "IN-MV")]
    InMv,
    #[serde(rename = "NG-MV")]
    NgMv,
    #[serde(rename = "IN-TR")]
    InTr,
}

impl Dialect {
    pub const ALL: [Dialect; 6] = [
        Dialect::EnUs,
        Dialect::EnIn,
        Dialect::EnNg,
        Dialect::InMv,
        Dialect::NgMv,
        Dialect::InTr,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Dialect::EnUs => "en-US",
            Dialect::EnIn => "en-IN",
            Dialect::EnNg => "en-NG",
            Dialect::InMv => "IN-MV",
            Dialect::NgMv => "NG-MV",
            Dialect::InTr => "IN-TR",
        }
    }

    pub fn parse(tag: &str) -> Result<Self, CorpusError> {
        Self::ALL
            .into_iter()
            .find(|d| d.tag() == tag)
            .ok_or_else(|| CorpusError::UnknownDialect(tag.to_string()))
    }

    /// True for the corpora produced by automatic transformation rather than
    /// recorded speech.
    pub fn is_synthetic(self) -> bool {
        matches!(self, Dialect::InMv | Dialect::NgMv | Dialect::InTr)
    }
}

impl fmt::Display for Dialect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Describer,
    Guesser,
}

impl Speaker {
    /// Display name used when rendering prompts.
    pub fn label(self) -> &'static str {
        match self {
            Speaker::Describer => "Describer",
            Speaker::Guesser => "Guesser",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

impl Turn {
    pub fn new(speaker: Speaker, text: impl Into<String>) -> Self {
        Turn {
            speaker,
            text: text.into(),
        }
    }
}

/// A full game transcript for one target word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub dialect: Dialect,
    pub target_word: String,
    pub split: Split,
    pub turns: Vec<Turn>,
}

impl Conversation {
    /// Checks the structural invariants: nonempty turns, nonempty target and
    /// maskability (the target is uttered in at least one guesser turn).
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.id.is_empty() {
            return Err(CorpusError::Validation {
                id: "<unnamed>".into(),
                message: "empty id".into(),
            });
        }
        if self.target_word.trim().is_empty() {
            return Err(CorpusError::Validation {
                id: self.id.clone(),
                message: "empty target_word".into(),
            });
        }
        if self.turns.is_empty() {
            return Err(CorpusError::Validation {
                id: self.id.clone(),
                message: "conversation has no turns".into(),
            });
        }
        if !self.is_maskable() {
            return Err(CorpusError::Validation {
                id: self.id.clone(),
                message: format!(
                    "target {:?} never appears in a guesser turn",
                    self.target_word
                ),
            });
        }
        Ok(())
    }

    pub fn is_maskable(&self) -> bool {
        self.turns
            .iter()
            .any(|t| t.speaker == Speaker::Guesser && utters_target(&t.text, &self.target_word))
    }
}

/// A masked TWP instance: the winning guesser turn is `[MASK]` and later turns
/// are gone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedExample {
    pub source_id: String,
    pub dialect: Dialect,
    pub target_word: String,
    pub split: Split,
    pub masked_turns: Vec<Turn>,
}

impl MaskedExample {
    /// Structural invariants: the final turn is a guesser turn whose text is
    /// exactly `[MASK]`, the mask occurs exactly once, and the target does not
    /// survive in any remaining turn.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |message: String| CorpusError::InvalidMasked {
            id: self.source_id.clone(),
            message,
        };
        let last = self
            .masked_turns
            .last()
            .ok_or_else(|| invalid("no turns".into()))?;
        if last.speaker != Speaker::Guesser || last.text != MASK_TOKEN {
            return Err(invalid(format!(
                "final turn must be (guesser, {MASK_TOKEN:?}), got ({:?}, {:?})",
                last.speaker, last.text
            )));
        }
        let mask_count: usize = self
            .masked_turns
            .iter()
            .map(|t| t.text.matches(MASK_TOKEN).count())
            .sum();
        if mask_count != 1 {
            return Err(invalid(format!(
                "{MASK_TOKEN} occurs {mask_count} times, expected exactly once"
            )));
        }
        if self.target_word.trim().is_empty() {
            return Err(invalid("empty target_word".into()));
        }
        let n = self.masked_turns.len();
        for turn in &self.masked_turns[..n - 1] {
            if utters_target(&turn.text, &self.target_word) {
                return Err(invalid(format!(
                    "target {:?} still present in remaining turn {:?}",
                    self.target_word, turn.text
                )));
            }
        }
        Ok(())
    }

    /// Renders this example with the given template. See [`render_prompt`].
    pub fn prompt_text(&self, template: &PromptTemplate) -> Result<String, CorpusError> {
        render_prompt(self, template)
    }
}

/// Masks a conversation: the first guesser turn uttering the target becomes
/// `[MASK]` and all later turns are pruned.
pub fn mask_conversation(conv: &Conversation) -> Result<MaskedExample, CorpusError> {
    let hit = conv
        .turns
        .iter()
        .position(|t| t.speaker == Speaker::Guesser && utters_target(&t.text, &conv.target_word))
        .ok_or_else(|| CorpusError::Unmaskable {
            id: conv.id.clone(),
            target: conv.target_word.clone(),
        })?;
    let mut masked_turns: Vec<Turn> = conv.turns[..hit].to_vec();
    masked_turns.push(Turn::new(Speaker::Guesser, MASK_TOKEN));
    let example = MaskedExample {
        source_id: conv.id.clone(),
        dialect: conv.dialect,
        target_word: conv.target_word.clone(),
        split: conv.split,
        masked_turns,
    };
    example.validate()?;
    Ok(example)
}

/// Label of a contrastive pair: positive pairs share a target word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairLabel {
    Positive,
    Negative,
}

impl PairLabel {
    pub fn value(self) -> i8 {
        match self {
            PairLabel::Positive => 1,
            PairLabel::Negative => -1,
        }
    }

    pub fn from_value(v: i64) -> Option<Self> {
        match v {
            1 => Some(PairLabel::Positive),
            -1 => Some(PairLabel::Negative),
            _ => None,
        }
    }
}

impl Serialize for PairLabel {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_i8(self.value())
    }
}

impl<'de> Deserialize<'de> for PairLabel {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = i64::deserialize(deserializer)?;
        PairLabel::from_value(v)
            .ok_or_else(|| serde::de::Error::custom(format!("label must be 1 or -1, got {v}")))
    }
}

/// A cross-dialect pair of masked examples. Side `a` is the frozen reference
/// side of the contrastive loss, side `b` the dialect in focus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub a_id: String,
    pub b_id: String,
    pub label: PairLabel,
}

/// Reads a conversations.jsonl file, validating every record.
pub fn load_conversations(path: impl AsRef<Path>) -> Result<Vec<Conversation>, CorpusError> {
    let (convs, issues) = load_conversations_inner(path.as_ref(), true)?;
    debug_assert!(issues.is_empty());
    Ok(convs)
}

/// Reads a conversations.jsonl file, collecting malformed or invalid records
/// as issues instead of failing. Used by the preparation command, which
/// reports violations and continues.
pub fn load_conversations_lenient(
    path: impl AsRef<Path>,
) -> Result<(Vec<Conversation>, Vec<CorpusError>), CorpusError> {
    load_conversations_inner(path.as_ref(), false)
}

fn load_conversations_inner(
    path: &Path,
    strict: bool,
) -> Result<(Vec<Conversation>, Vec<CorpusError>), CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut issues = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Result<Conversation, _> = serde_json::from_str(&line);
        let conv = match parsed {
            Ok(conv) => conv,
            Err(e) => {
                let err = CorpusError::Parse {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    message: e.to_string(),
                };
                if strict {
                    return Err(err);
                }
                issues.push(err);
                continue;
            }
        };
        match conv.validate() {
            Ok(()) => out.push(conv),
            Err(err) if strict => return Err(err),
            Err(err) => issues.push(err),
        }
    }
    Ok((out, issues))
}

pub fn save_conversations(
    path: impl AsRef<Path>,
    conversations: &[Conversation],
) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = BufWriter::new(File::create(path).map_err(io_err)?);
    for conv in conversations {
        let line = serde_json::to_string(conv).expect("conversation serializes");
        writer.write_all(line.as_bytes()).map_err(io_err)?;
        writer.write_all(b"\n").map_err(io_err)?;
    }
    writer.flush().map_err(io_err)?;
    Ok(())
}

/// On-disk record for masked.jsonl: the conversations.jsonl schema plus a
/// `masked` flag that must be true.
#[derive(Debug, Serialize, Deserialize)]
struct MaskedRecord {
    id: String,
    dialect: Dialect,
    target_word: String,
    split: Split,
    turns: Vec<Turn>,
    masked: bool,
}

pub fn save_masked(path: impl AsRef<Path>, examples: &[MaskedExample]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = BufWriter::new(File::create(path).map_err(io_err)?);
    for ex in examples {
        let record = MaskedRecord {
            id: ex.source_id.clone(),
            dialect: ex.dialect,
            target_word: ex.target_word.clone(),
            split: ex.split,
            turns: ex.masked_turns.clone(),
            masked: true,
        };
        let line = serde_json::to_string(&record).expect("masked record serializes");
        writer.write_all(line.as_bytes()).map_err(io_err)?;
        writer.write_all(b"\n").map_err(io_err)?;
    }
    writer.flush().map_err(io_err)?;
    Ok(())
}

pub fn load_masked(path: impl AsRef<Path>) -> Result<Vec<MaskedExample>, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: MaskedRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: e.to_string(),
            })?;
        if !record.masked {
            return Err(CorpusError::InvalidMasked {
                id: record.id,
                message: "record is not flagged masked".into(),
            });
        }
        let example = MaskedExample {
            source_id: record.id,
            dialect: record.dialect,
            target_word: record.target_word,
            split: record.split,
            masked_turns: record.turns,
        };
        example.validate()?;
        out.push(example);
    }
    Ok(out)
}

pub fn save_pairs(path: impl AsRef<Path>, pairs: &[ContrastivePair]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = BufWriter::new(File::create(path).map_err(io_err)?);
    for pair in pairs {
        let line = serde_json::to_string(pair).expect("pair serializes");
        writer.write_all(line.as_bytes()).map_err(io_err)?;
        writer.write_all(b"\n").map_err(io_err)?;
    }
    writer.flush().map_err(io_err)?;
    Ok(())
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<ContrastivePair>, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: ContrastivePair =
            serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: e.to_string(),
            })?;
        out.push(pair);
    }
    Ok(out)
}

/// Builds the augmented training set: all of `x_train` plus a seeded sample of
/// `us_fraction` of `us_train` (without replacement, rounded to nearest),
/// shuffled with the same seed.
pub fn augment(
    us_train: &[MaskedExample],
    x_train: &[MaskedExample],
    us_fraction: f64,
    seed: u64,
) -> Result<Vec<MaskedExample>, CorpusError> {
    if !(0.0..=1.0).contains(&us_fraction) || us_fraction.is_nan() {
        return Err(CorpusError::FractionOutOfRange(us_fraction));
    }
    let take = (us_fraction * us_train.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampled = rand::seq::index::sample(&mut rng, us_train.len().max(take), take);
    let mut out: Vec<MaskedExample> = x_train.to_vec();
    let mut picked: Vec<usize> = sampled.into_iter().collect();
    picked.sort_unstable();
    out.extend(picked.into_iter().map(|i| us_train[i].clone()));
    out.shuffle(&mut rng);
    Ok(out)
}

/// Builds the pseudo-parallel corpus between two pools of masked examples.
///
/// Every cross pair with an equal normalized target becomes a positive; a
/// seeded uniform sample of at most `max_negatives` unequal-target cross pairs
/// becomes the negatives. Side `a` is the frozen side of the loss.
pub fn build_parallel_pairs(
    side_a: &[MaskedExample],
    side_b: &[MaskedExample],
    max_negatives: usize,
    seed: u64,
) -> Result<Vec<ContrastivePair>, CorpusError> {
    if side_a.is_empty() {
        return Err(CorpusError::EmptySide("a"));
    }
    if side_b.is_empty() {
        return Err(CorpusError::EmptySide("b"));
    }
    let norm_a: Vec<String> = side_a
        .iter()
        .map(|e| normalize_target(&e.target_word))
        .collect();
    let norm_b: Vec<String> = side_b
        .iter()
        .map(|e| normalize_target(&e.target_word))
        .collect();
    let mut pairs = Vec::new();
    let mut negative_slots = Vec::new();
    for (i, a) in side_a.iter().enumerate() {
        for (j, b) in side_b.iter().enumerate() {
            if a.dialect == b.dialect {
                return Err(CorpusError::SameDialectPair {
                    a_id: a.source_id.clone(),
                    b_id: b.source_id.clone(),
                    dialect: a.dialect,
                });
            }
            if norm_a[i] == norm_b[j] {
                pairs.push(ContrastivePair {
                    a_id: a.source_id.clone(),
                    b_id: b.source_id.clone(),
                    label: PairLabel::Positive,
                });
            } else {
                negative_slots.push((i, j));
            }
        }
    }
    let take = max_negatives.min(negative_slots.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, negative_slots.len(), take)
        .into_iter()
        .collect();
    picked.sort_unstable();
    for k in picked {
        let (i, j) = negative_slots[k];
        pairs.push(ContrastivePair {
            a_id: side_a[i].source_id.clone(),
            b_id: side_b[j].source_id.clone(),
            label: PairLabel::Negative,
        });
    }
    Ok(pairs)
}

/// Per-split record counts for one corpus subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.valid + self.test
    }
}

pub fn split_counts<'a, I: IntoIterator<Item = &'a Split>>(splits: I) -> SplitCounts {
    let mut counts = SplitCounts::default();
    for split in splits {
        match split {
            Split::Train => counts.train += 1,
            Split::Valid => counts.valid += 1,
            Split::Test => counts.test += 1,
        }
    }
    counts
}

/// Distinct normalized target words in a pool, in first-seen order.
pub fn distinct_targets(examples: &[MaskedExample]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for ex in examples {
        let norm = normalize_target(&ex.target_word);
        if seen.insert(norm.clone()) {
            out.push(norm);
        }
    }
    out
}

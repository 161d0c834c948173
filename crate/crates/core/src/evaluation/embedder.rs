//! The pluggable sentence-embedder contract plus the dependency-free
//! reference implementation used in tests and desk-scale runs: an L2-normalized
//! character-trigram count vector hashed to a fixed dimension. Production runs
//! mount a real sentence-embedding backend behind the same trait.

use ndarray::Array1;

/// A unit-norm embedding; `fallback` marks the fixed stand-in vector returned
/// for empty input, where a trigram profile does not exist.
#[derive(Debug, Clone)]
pub struct EmbedOutcome {
    pub vector: Array1<f64>,
    pub fallback: bool,
}

pub trait Embedder {
    fn dim(&self) -> usize;

    /// Deterministic unit-norm embedding (L2 norm 1 within 1e-6).
    fn embed(&self, text: &str) -> EmbedOutcome;
}

#[derive(Debug, Clone)]
pub struct TrigramHashEmbedder {
    dim: usize,
}

impl TrigramHashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 2, "embedding dimension too small");
        TrigramHashEmbedder { dim }
    }
}

impl Default for TrigramHashEmbedder {
    fn default() -> Self {
        TrigramHashEmbedder::new(256)
    }
}

impl Embedder for TrigramHashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> EmbedOutcome {
        let chars: Vec<char> = text.chars().collect();
        if chars.is_empty() {
            let mut vector = Array1::zeros(self.dim);
            vector[0] = 1.0;
            return EmbedOutcome {
                vector,
                fallback: true,
            };
        }
        let mut counts = Array1::<f64>::zeros(self.dim);
        if chars.len() < 3 {
            counts[self.slot(&chars)] += 1.0;
        } else {
            for gram in chars.windows(3) {
                counts[self.slot(gram)] += 1.0;
            }
        }
        let norm = counts.dot(&counts).sqrt();
        EmbedOutcome {
            vector: counts / norm,
            fallback: false,
        }
    }
}

impl TrigramHashEmbedder {
    fn slot(&self, gram: &[char]) -> usize {
        (fnv1a(gram) % self.dim as u64) as usize
    }
}

/// FNV-1a over the gram's UTF-8 bytes; stable across platforms and releases,
/// unlike the std hasher.
fn fnv1a(gram: &[char]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let mut buf = [0u8; 4];
    for &ch in gram {
        for &byte in ch.encode_utf8(&mut buf).as_bytes() {
            hash ^= u64::from(byte);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

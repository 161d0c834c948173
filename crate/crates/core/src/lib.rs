//! LoRDD: dual low-rank adapter dialect adaptation for decoder language
//! models.
//!
//! The crate covers the full pipeline at desk scale: corpus masking and
//! pseudo-parallel pair construction ([`corpus`]), a deterministic reference
//! decoder behind the backend contract ([`lm`]), low-rank adapter injection
//! and stacking ([`adapters`]), the two training objectives ([`training`]) and
//! the target-word-prediction evaluation harness ([`evaluation`]).

pub mod adapters;
pub mod corpus;
pub mod evaluation;
pub mod training;
pub mod lm;

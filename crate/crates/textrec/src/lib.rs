//! textrec: generative sequential recommendation at desk scale.
//!
//! The pipeline turns raw interaction logs into next-item recommendations:
//!
//! 1. [`ingest`] parses MovieLens/Amazon dumps into a title catalog and
//!    per-user chronological sequences, split leave-one-out.
//! 2. [`prompt`] formats each (history, target) pair as an
//!    instruction/input/output text triple.
//! 3. [`tokenizer`] is a trainable byte-level BPE tokenizer.
//! 4. [`model`] is a small autoregressive transformer decoder with
//!    optional low-rank adapters on the attention projections.
//! 5. [`train`] runs AdamW with linear warmup and checkpointing.
//! 6. [`decode`] generates top-k items with beam search constrained to a
//!    token trie over catalog titles, so every output is a valid item.
//! 7. [`metrics`] scores ranked lists with HR@k and NDCG@k.
//! 8. [`cli`] wires everything into reproducible commands.

pub mod cli;
pub mod decode;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod prompt;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};

/// Serialize one value as a single JSON line with lexicographically sorted
/// keys. Going through `serde_json::Value` sorts object keys, which keeps
/// every emitted artifact byte-stable across runs.
pub fn canonical_json_line<T: serde::Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

//! moi-pack: packs multi-task instruction corpora into attention-masked,
//! loss-weighted training batches.
//!
//! The pipeline stages live in their own modules and are usable as a
//! library independent of the CLI:
//!
//! - [`corpus`]: JSONL parsing, per-task system prompts, validation.
//! - [`tokenizer`]: the built-in byte tokenizer and vocab-file tokenizer.
//! - [`chatml`]: conversation rendering and response-span bookkeeping.
//! - [`sampling`]: deterministic shuffling / balanced interleaving plans.
//! - [`packing`]: greedy concatenation of chunks into fixed-length packs.
//! - [`masking`]: attention-visibility specs and per-segment position ids.
//! - [`weights`]: per-token loss-weight assignment schemes.
//! - [`attest`]: a tiny seeded transformer that executes packed items to
//!   prove isolation and weighting claims.
//! - [`container`]: the on-disk batch format (header + raw arrays).
//! - [`config`]: TOML run configuration.
//! - [`pipeline`]: end-to-end pack / verify / inspect / stats drivers.

pub mod attest;
pub mod chatml;
pub mod config;
pub mod container;
pub mod corpus;
pub mod error;
pub mod masking;
pub mod packing;
pub mod pipeline;
pub mod sampling;
pub mod tokenizer;
pub mod weights;

pub use error::{Error, Result};

//! Attention-guided retrieval over documents of unbounded length.
//!
//! A document is cut into sentence-aligned chunks and read one chunk at a
//! time. For each chunk the model sees `cached sentences ⧺ chunk ⧺ question`;
//! the question's attention over that context picks which sentences stay in
//! the cache for the next window. The answer is generated from the final
//! cache, so per-pass length stays bounded however long the document is.
//!
//! Models are reached through [`provider::AttentionProvider`]: a built-in
//! seeded decoder, a planted oracle with known ground truth, or an external
//! adapter speaking a line-delimited JSON protocol.

pub mod analysis;
pub mod attnkernel;
pub mod cache;
pub mod error;
pub mod nih;
pub mod pipeline;
pub mod provider;
pub mod retrieval;
pub mod textseg;
pub mod tokenizer;

pub use error::{Error, Result};
pub use pipeline::{run, PipelineConfig, RunOutput, RunTrace};

//! Sentence-similarity models for scientific abstracts trained on co-citation
//! pairs.
//!
//! * [`pipeline`] turns citation records into weighted positive pairs,
//!   constrained negatives and train/validation/test splits.
//! * [`encoder`] is a compact BERT-style encoder with domain tokens.
//! * [`moe`] extends a trained encoder into a mixture-of-experts model whose
//!   initial function is unchanged.
//! * [`train`] fine-tunes with an in-batch contrastive loss and early stopping.
//! * [`eval`] scores pairs with cosine similarity, F1max, distance and
//!   accuracy, and provides the TF-IDF baseline.
//! * [`checkpoint`] stores models in a named-tensor container.

pub mod checkpoint;
pub mod encoder;
pub mod eval;
pub mod moe;
mod ops;
pub mod pipeline;
pub mod synthetic;
pub mod train;

mod error;

pub use error::{Error, ErrorKind, Result};

/// Keeps the guide's examples compiling.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    mod encoder {}
    #[doc = include_str!("../../../book/src/moe.md")]
    mod moe {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

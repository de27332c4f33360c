//! Key-based ownership protection for recurrent captioning models.
//!
//! A secret key is embedded into the LSTM hidden state at every decode
//! step (element-wise add or multiply), a sign pattern is planted in the
//! hidden-state signs via a hinge regularizer, and ownership is verified
//! through key-based, signature-based, and trigger-set protocols. The
//! `attacks` module measures robustness against forged keys, forged
//! signatures, pruning, and fine-tuning as sweep curves.
//!
//! Everything is 64-bit float and deterministically seeded: identical
//! seeds produce byte-identical corpora, checkpoints, and reports.

pub mod attacks;
pub mod capmetrics;
pub mod datagen;
pub mod error;
pub mod evalrun;
pub mod keying;
pub mod numcore;
pub mod seqmodel;
pub mod training;
pub mod verification;

pub use error::HkrError;

//! Question-answer retrieval over a fixed answer set, built from scratch:
//! a gated convolutional sentence encoder trained with a max-margin ranking
//! loss, a memory-augmented one-shot question-type labeler that feeds the
//! encoder extra label features, a BM25 baseline, and the evaluation harness
//! that compares them.
//!
//! The numeric substrate is a small dense-tensor library with record-and-
//! replay reverse-mode differentiation ([`tensor`]), diagonal AdaGrad, and a
//! finite-difference gradient checker. Everything is deterministic under a
//! fixed seed: training twice with the same inputs produces bit-identical
//! checkpoints.

pub mod bm25;
pub mod cgnn;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod ntm;
pub mod scenarios;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use tensor::{Tensor, tape::Tape, tape::Var};

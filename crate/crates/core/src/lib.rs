//! Desk-scale neural machine translation toolkit.
//!
//! The pipeline runs end to end on small corpora: text normalization and
//! parallel-corpus handling, unigram subword tokenization, two seq2seq
//! model families (bidirectional LSTM with additive attention, and a
//! Transformer), three training regimes for domain adaptation
//! (general-only, mixed with oversampling, fine-tuning), greedy decoding
//! with a comma-split heuristic for long inputs, and corpus-level BLEU.
//!
//! All numeric code is generic over the scalar type: production training
//! runs in `f32`, finite-difference verification in `f64`.

pub mod corpus;
pub mod decoding;
pub mod evalkit;
pub mod models;
pub mod optim;
pub mod report;
pub mod scalar;
pub mod subword;
pub mod tensor;
pub mod toydata;
pub mod training;

pub use scalar::Scalar;

/// Scalar type used by the production pipeline.
pub type Real = f32;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Tape64 = tensor::Tape<f64>;

//! Toolkit for adapting a general translation model to a specialized domain:
//! BPE vocabulary expansion, two-stage fine-tuning on term pairs and a
//! parallel corpus, a dual-pass KL consistency objective, and BLEU/ROUGE
//! evaluation.

pub mod autograd;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};

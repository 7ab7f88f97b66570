//! Class-incremental spoken language understanding on synthetic paired
//! audio/text data: toy encoders and decoder, contrastive distillation and
//! alignment losses, the rehearsal protocol, and its metrics.

pub mod embedding;
pub mod error;
pub mod gradsuite;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod report;
pub mod rng;
pub mod seq2seq;
pub mod synth;

pub use error::{Error, Result};

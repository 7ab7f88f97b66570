//! Extended transcripts and the attention decoder.

pub mod decoder;
pub mod vocab;

pub use decoder::{asr_cross_entropy, decode, decode_all, sequence_log_probs, Decoded};
pub use vocab::{extract_intent, TokenRole, TokenSequence, Vocabulary, BOS, EOS, PAD, SEP};

//! A small trainable causal transformer producing per-token contextual
//! representations, plus the entity-prediction and next-token heads and a
//! greedy decoder.
//!
//! Causal masking is used throughout: the cloze target is always
//! sentence-final, so one stack serves both masked-entity prediction and
//! left-to-right generation.

mod decode;
mod transformer;
mod vocab;

pub use decode::greedy_decode;
pub use transformer::{ContextEncoder, EntityHead, TransformerConfig, VocabHead};
pub use vocab::{Vocabulary, BOS_ID, MASK_ID, PAD_ID, UNK_ID};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("input length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("attention mask length {mask_len} does not match {len} tokens")]
    MaskLength { mask_len: usize, len: usize },
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
}

pub type Result<T> = std::result::Result<T, ContextError>;

/// Argmax with smallest-index tie-breaking; the crate-wide prediction rule.
pub fn argmax_ties_low(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_toward_smallest_index() {
        assert_eq!(argmax_ties_low(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax_ties_low(&[1.0, 2.0, 2.0]), 1);
        assert_eq!(argmax_ties_low(&[-1.0, -3.0, -0.5]), 2);
    }
}

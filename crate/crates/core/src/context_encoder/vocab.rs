use std::collections::HashMap;

pub const PAD_ID: usize = 0;
pub const MASK_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const BOS_ID: usize = 3;

const RESERVED: [&str; 4] = ["[PAD]", "[MASK]", "[UNK]", "[BOS]"];

/// Token <-> id mapping with reserved ids 0..=3 for PAD, MASK, UNK, BOS.
///
/// Serializes as a plain JSON array of tokens where the index is the id.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from a token stream in first-appearance order.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(corpus: I) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for tok in corpus {
            if !index.contains_key(tok) {
                index.insert(tok.to_string(), tokens.len());
                tokens.push(tok.to_string());
            }
        }
        Vocabulary { tokens, index }
    }

    /// Rebuild from a serialized token array.
    pub fn from_tokens(tokens: Vec<String>) -> Option<Self> {
        if tokens.len() < RESERVED.len() {
            return None;
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens[i] != *r {
                return None;
            }
        }
        let index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return None; // duplicate tokens break the bijection
        }
        Some(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    /// Token id, falling back to UNK for unknown tokens.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::build(["alpha", "beta"]);
        assert_eq!(v.id("[PAD]"), PAD_ID);
        assert_eq!(v.id("[MASK]"), MASK_ID);
        assert_eq!(v.id("[UNK]"), UNK_ID);
        assert_eq!(v.id("[BOS]"), BOS_ID);
        assert_eq!(v.id("alpha"), 4);
        assert_eq!(v.id("beta"), 5);
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let v = Vocabulary::build(["alpha"]);
        assert_eq!(v.id("missing"), UNK_ID);
    }

    #[test]
    fn mapping_is_a_bijection_over_the_array() {
        let v = Vocabulary::build(["a", "b", "a", "c", "b"]);
        for (i, tok) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(tok), i);
        }
        assert_eq!(v.len(), 4 + 3);
    }

    #[test]
    fn round_trip_through_token_array() {
        let v = Vocabulary::build(["x", "y", "z"]);
        let back = Vocabulary::from_tokens(v.tokens().to_vec()).unwrap();
        assert_eq!(back, v);
        // Corrupted reserved prefix is rejected.
        let mut bad = v.tokens().to_vec();
        bad[0] = "oops".into();
        assert!(Vocabulary::from_tokens(bad).is_none());
        // Duplicates are rejected.
        let mut dup = v.tokens().to_vec();
        dup.push("x".into());
        assert!(Vocabulary::from_tokens(dup).is_none());
    }
}

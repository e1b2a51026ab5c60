//! Closed vocabulary shared by the synthetic world and the encoders.
//!
//! Prompts, captions, and instructions are whitespace-joined sequences of
//! these words; there is no subword machinery. `<sep>` is the instruction
//! boundary marker: the prompt builder appends one after every instruction,
//! so the number of `<sep>` positions equals the number of instructions.

use std::fmt;

/// Instruction boundary marker.
pub const SEP: &str = "<sep>";

/// Every word the pipeline understands, in id order.
pub const WORDS: &[&str] = &[
    SEP, // id 0
    // verbs
    "add", "remove", "replace", "recolor",
    // function words
    "a", "the", "at", "with", "to",
    // shapes
    "box", "disc",
    // colors
    "red", "green", "blue", "yellow", "magenta", "cyan", "white", "gray",
    // regions
    "topleft", "topright", "bottomleft", "bottomright", "center",
    // caption words
    "scene", "shows", "and", "empty", "is", "in", "on", "of", "an", "it",
];

/// Token id into [`WORDS`].
pub type TokenId = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutOfVocabulary {
    pub word: String,
}

impl fmt::Display for OutOfVocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "word {:?} is not in the vocabulary", self.word)
    }
}

impl std::error::Error for OutOfVocabulary {}

pub fn vocab_size() -> usize {
    WORDS.len()
}

pub fn token_id(word: &str) -> Option<TokenId> {
    WORDS.iter().position(|&w| w == word)
}

pub fn word(id: TokenId) -> &'static str {
    WORDS[id]
}

/// Whitespace tokenizer over the closed vocabulary.
pub fn tokenize(text: &str) -> Result<Vec<TokenId>, OutOfVocabulary> {
    text.split_whitespace()
        .map(|w| {
            token_id(w).ok_or_else(|| OutOfVocabulary {
                word: w.to_string(),
            })
        })
        .collect()
}

pub fn detokenize(ids: &[TokenId]) -> String {
    ids.iter()
        .map(|&i| WORDS[i])
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_unique_and_roundtrip() {
        for (i, w) in WORDS.iter().enumerate() {
            assert_eq!(token_id(w), Some(i), "duplicate or misordered word {w}");
        }
    }

    #[test]
    fn tokenize_rejects_unknown_words() {
        let err = tokenize("remove the dragon").unwrap_err();
        assert_eq!(err.word, "dragon");
    }

    #[test]
    fn empty_text_gives_empty_sequence() {
        assert!(tokenize("").unwrap().is_empty());
    }

    #[test]
    fn tokenize_detokenize_roundtrip() {
        let text = "add a red box at center <sep>";
        let ids = tokenize(text).unwrap();
        assert_eq!(detokenize(&ids), text);
    }
}

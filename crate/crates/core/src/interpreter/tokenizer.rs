use std::hash::Hasher;

use fnv::FnvHasher;

use super::{InterpreterConfig, InterpreterError};

/// Reserved id for padding. Sequences built here are never padded, but the
/// id stays reserved so hashed words can't collide with it.
pub const PAD_ID: u32 = 0;
pub const UNKNOWN_ID: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lowercased alphanumeric runs of `label`.
pub fn words(label: &str) -> Vec<String> {
    label
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_owned)
        .collect()
}

pub fn word_id(word: &str, vocab_size: usize) -> u32 {
    let mut hasher = FnvHasher::default();
    hasher.write(word.as_bytes());
    let span = (vocab_size - 2) as u64;
    (2 + hasher.finish() % span) as u32
}

/// Hashes each word of `label` into `[2, V)` and keeps at most
/// `S - prompt_len` tokens.
pub fn tokenize(
    label: &str,
    config: &InterpreterConfig,
    prompt_len: usize,
) -> Result<TokenSequence, InterpreterError> {
    let words = words(label);
    if words.is_empty() {
        return Err(InterpreterError::EmptyLabel(label.to_owned()));
    }
    let room = config.max_sequence_len.saturating_sub(prompt_len);
    if room == 0 {
        return Err(InterpreterError::SequenceOverflow {
            needed: prompt_len + 1,
            max: config.max_sequence_len,
        });
    }
    let ids = words
        .iter()
        .take(room)
        .map(|w| word_id(w, config.vocab_size))
        .collect();
    Ok(TokenSequence { ids })
}

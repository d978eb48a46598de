//! Whitespace tokenizer with a hash-to-id vocabulary.
//!
//! Words are mapped into `[RESERVED, vocab_size)` by FNV-1a hashing, so the
//! mapping is deterministic across runs and needs no fitted vocabulary file.
//! Distinct words may collide; at desk scale that behaves like feature
//! hashing and is harmless.

/// Reserved token ids.
pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: usize = 4;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn word_id(word: &str, vocab_size: usize) -> usize {
    if vocab_size <= RESERVED {
        return UNK;
    }
    RESERVED + (fnv1a(word.as_bytes()) % (vocab_size - RESERVED) as u64) as usize
}

/// Tokenizes for embedding: whitespace-split word ids, truncated to `max_len`.
/// Whitespace-only text yields an empty sequence.
pub fn encode(text: &str, vocab_size: usize, max_len: usize) -> Vec<usize> {
    text.split_whitespace()
        .take(max_len)
        .map(|w| word_id(w, vocab_size))
        .collect()
}

/// Tokenizes for next-token training: `[BOS] words [EOS]`, truncated to
/// `max_len` (the EOS is dropped first if the text is long).
pub fn encode_lm(text: &str, vocab_size: usize, max_len: usize) -> Vec<usize> {
    let mut ids = Vec::with_capacity(max_len.min(text.len() / 4 + 2));
    ids.push(BOS);
    for w in text.split_whitespace() {
        if ids.len() >= max_len {
            return ids;
        }
        ids.push(word_id(w, vocab_size));
    }
    if ids.len() < max_len {
        ids.push(EOS);
    }
    ids
}

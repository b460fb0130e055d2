//! Small text helpers shared by the indexer, embedder and re-ranker.

use sha2::{Digest, Sha256};
use unicode_segmentation::UnicodeSegmentation;

/// Case-folded Unicode word tokens, in order of appearance.
pub fn tokenize(text: &str) -> Vec<String> {
    text.unicode_words().map(|w| w.to_lowercase()).collect()
}

/// Hex SHA-256 over length-prefixed parts, so `("ab","c")` and `("a","bc")` differ.
pub fn digest_hex(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Number of Unicode scalar values in `s`.
pub fn char_len(s: &str) -> usize {
    s.chars().count()
}

/// Substring by character offsets `[start, end)`.
///
/// Offsets past the end are clamped.
pub fn char_slice(s: &str, start: usize, end: usize) -> &str {
    let byte_at = |n: usize| s.char_indices().nth(n).map(|(i, _)| i).unwrap_or(s.len());
    let b0 = byte_at(start);
    let b1 = if end <= start { b0 } else { b0 + byte_at_from(&s[b0..], end - start) };
    &s[b0..b1]
}

fn byte_at_from(s: &str, n: usize) -> usize {
    s.char_indices().nth(n).map(|(i, _)| i).unwrap_or(s.len())
}

/// Converts a byte offset into `s` to a character offset.
pub fn byte_to_char(s: &str, byte: usize) -> usize {
    s[..byte].chars().count()
}

//! Shared text normalization: tokenization, surface-form cleanup, stop words.
//!
//! The same rules feed the embedder, the keyword matcher, and the answer
//! scorer, so they live in one place.

/// Fixed stop-word list used by keyword matching (25 words: articles,
/// copulas, and the template glue words).
pub const STOP_WORDS: [&str; 25] = [
    "a", "am", "an", "and", "are", "be", "been", "being", "did", "do", "does", "how", "in", "is",
    "object", "of", "or", "relation", "that", "the", "this", "to", "was", "were", "what",
];

pub fn is_stop_word(token: &str) -> bool {
    STOP_WORDS.binary_search(&token).is_ok()
}

/// Lowercase and split on anything that is not alphanumeric. Underscores act
/// as separators, so `fire_truck` tokenizes like `fire truck`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect()
}

/// Canonical surface form: lowercased, trimmed, underscores as spaces,
/// interior whitespace collapsed to single spaces.
pub fn normalize_surface(s: &str) -> String {
    s.to_lowercase()
        .replace('_', " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

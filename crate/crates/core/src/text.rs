//! Small string helpers shared across modules.

/// Collapses every whitespace run to a single space and trims the ends.
pub(crate) fn collapse_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Lowercase + whitespace collapse; the key used for matching and caching.
pub(crate) fn normalize(text: &str) -> String {
    collapse_ws(&text.to_lowercase())
}

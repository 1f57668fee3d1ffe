//! Small text utilities shared by the lexical oracle, the judges and the
//! leakage detector.

use std::collections::BTreeSet;

/// Words ignored when scoring lexical overlap.
const STOPWORDS: &[&str] = &[
    "a", "an", "and", "any", "are", "as", "at", "be", "by", "can", "do", "does", "for", "from",
    "has", "have", "her", "his", "how", "i", "if", "in", "is", "it", "its", "me", "my", "of",
    "on", "or", "please", "s", "she", "that", "the", "their", "there", "this", "to", "was",
    "we", "what", "which", "who", "with", "you", "your", "he", "patient", "patients",
];

/// Lowercase alphanumeric runs, in order.
pub fn alnum_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.contains(&token)
}

/// Unique non-stopword tokens.
pub fn content_token_set(text: &str) -> BTreeSet<String> {
    alnum_tokens(text)
        .into_iter()
        .filter(|t| !is_stopword(t))
        .collect()
}

/// Lowercase, punctuation stripped, articles dropped, whitespace collapsed.
pub fn normalize_answer(text: &str) -> String {
    alnum_tokens(text)
        .into_iter()
        .filter(|t| !matches!(t.as_str(), "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Collapses any run of whitespace (including newlines) to one space.
pub fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Replaces `{name}` placeholders. Unknown placeholders are left as is.
pub fn fill_template(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in vars {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    out
}

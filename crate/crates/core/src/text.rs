//! Normalized token overlap used by the deterministic mock backend.

use std::collections::BTreeSet;

// Function words plus the boilerplate that rubric rules are phrased with.
const STOPWORDS: &[&str] = &[
    "a", "about", "all", "also", "an", "and", "answer", "any", "are", "as", "at", "be", "been",
    "being", "but", "by", "can", "could", "do", "does", "each", "for", "from", "has", "have",
    "how", "if", "in", "into", "is", "it", "its", "least", "may", "must", "need", "needs", "not",
    "of", "on", "one", "or", "response", "shall", "should", "so", "student", "such", "that", "the",
    "their", "them", "then", "there", "these", "they", "this", "those", "to", "was", "were",
    "what", "when", "which", "while", "who", "will", "with", "would",
];

/// Lowercased alphanumeric content tokens, stopwords and single characters removed.
pub fn content_tokens(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() > 1)
        .map(str::to_lowercase)
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect()
}

/// Fraction of `target`'s content tokens present in `source`.
///
/// An empty `source` covers nothing. A target without content tokens is
/// covered by any non-empty source.
pub fn coverage(target: &str, source: &str) -> f64 {
    let source_tokens = content_tokens(source);
    if source_tokens.is_empty() {
        return 0.0;
    }
    let target_tokens = content_tokens(target);
    if target_tokens.is_empty() {
        return 1.0;
    }
    let hit = target_tokens.intersection(&source_tokens).count();
    hit as f64 / target_tokens.len() as f64
}

/// Number of shared content tokens.
pub fn shared_tokens(a: &str, b: &str) -> usize {
    content_tokens(a).intersection(&content_tokens(b)).count()
}

/// Whitespace word count after trimming.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Blank-line separated paragraphs, trimmed, empty ones dropped.
pub fn paragraphs(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut last_end = 0;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let blank = line.trim().is_empty();
        match (blank, start) {
            (false, None) => start = Some(offset),
            (true, Some(s)) => {
                out.push(text[s..last_end].trim());
                start = None;
            }
            _ => {}
        }
        offset += line.len();
        if !blank {
            last_end = offset;
        }
    }
    if let Some(s) = start {
        out.push(text[s..last_end].trim());
    }
    out.into_iter().filter(|p| !p.is_empty()).collect()
}

/// Sentence-like pieces split on terminal punctuation and newlines.
pub fn sentences(text: &str) -> Vec<&str> {
    text.split_inclusive(['.', '!', '?', '\n'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

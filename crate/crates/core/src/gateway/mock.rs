//! Deterministic offline backend built on normalized token overlap.
//!
//! Every answer is a pure function of the request payload, so identical
//! requests produce byte-identical payloads on every run.

use async_trait::async_trait;
use serde_json::Value;

use super::task::{
    CscInput, CscOutput, CtmInput, CtmOutput, SegmentInput, SegmentOutput, SsrInput, SsrOutput,
    SubCondition, TaskKind,
};
use super::{Backend, BackendError};
use crate::text::{content_tokens, coverage, paragraphs, sentences, shared_tokens};

/// Coverage at or above which a rule counts as fully addressed.
pub const TAU_FULL: f64 = 0.75;
/// Coverage at or above which a rule counts as partially addressed.
pub const TAU_PARTIAL: f64 = 0.35;
/// Coverage a paragraph needs to be kept as part of a row's answer segment.
pub const TAU_SEG: f64 = 0.30;

const MODALS: &[&str] = &["must", "should", "shall", "will", "needs", "has"];
const MIN_PART_WORDS: usize = 3;

#[derive(Debug, Clone, Default)]
pub struct MockBackend;

impl MockBackend {
    pub const ID: &'static str = "mock";

    pub fn new() -> Self {
        Self
    }
}

#[async_trait]
impl Backend for MockBackend {
    fn id(&self) -> &str {
        Self::ID
    }

    async fn complete(&self, kind: TaskKind, payload: &Value) -> Result<Value, BackendError> {
        respond(kind, payload)
    }
}

/// Synchronous core of the mock backend.
pub fn respond(kind: TaskKind, payload: &Value) -> Result<Value, BackendError> {
    let bad = |e: serde_json::Error| BackendError::Fatal(format!("bad {kind} request: {e}"));
    let out = match kind {
        TaskKind::Ctm => {
            let input: CtmInput = serde_json::from_value(payload.clone()).map_err(bad)?;
            serde_json::to_value(CtmOutput {
                rules: split_rule(&input.criteria),
            })
        }
        TaskKind::Csc => {
            let input: CscInput = serde_json::from_value(payload.clone()).map_err(bad)?;
            serde_json::to_value(CscOutput {
                assignments: distribute(&input.child_rules, &input.parent_subconditions),
            })
        }
        TaskKind::Ssr => {
            let input: SsrInput = serde_json::from_value(payload.clone()).map_err(bad)?;
            serde_json::to_value(judge(&input))
        }
        TaskKind::Segment => {
            let input: SegmentInput = serde_json::from_value(payload.clone()).map_err(bad)?;
            serde_json::to_value(SegmentOutput {
                segment: segment(&input.answer, &input.row_rule),
            })
        }
    };
    out.map_err(|e| BackendError::Fatal(e.to_string()))
}

fn split_on_conjunctions(text: &str) -> Vec<String> {
    let mut parts = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for word in text.split_whitespace() {
        let bare = word.trim_end_matches(';');
        if word.eq_ignore_ascii_case("and") {
            parts.push(current.join(" "));
            current.clear();
        } else if bare.len() != word.len() {
            current.push(bare);
            parts.push(current.join(" "));
            current.clear();
        } else {
            current.push(word);
        }
    }
    parts.push(current.join(" "));
    parts
}

fn modal_prefix(part: &str) -> Option<String> {
    let words: Vec<&str> = part.split_whitespace().collect();
    let idx = words
        .iter()
        .take(5)
        .position(|w| MODALS.contains(&w.to_lowercase().as_str()))?;
    let end = match words[idx].to_lowercase().as_str() {
        // "needs to" / "has to"
        "needs" | "has"
            if words
                .get(idx + 1)
                .is_some_and(|w| w.eq_ignore_ascii_case("to")) =>
        {
            idx + 1
        }
        "needs" | "has" => return None,
        _ => idx,
    };
    Some(words[..=end].join(" "))
}

/// Split a rule on coordinating "and" / ";" into self-contained rules.
///
/// Returns the input verbatim (a single rule) when any piece would be shorter
/// than three words.
pub fn split_rule(criteria: &str) -> Vec<String> {
    let raw = split_on_conjunctions(criteria.trim());
    if raw.len() < 2
        || raw
            .iter()
            .any(|p| p.split_whitespace().count() < MIN_PART_WORDS)
    {
        return vec![criteria.to_string()];
    }
    let parts: Vec<String> = raw
        .iter()
        .map(|p| p.trim().trim_end_matches(['.', ',', ';']).to_string())
        .collect();
    let prefix = modal_prefix(&parts[0]);
    parts
        .into_iter()
        .enumerate()
        .map(|(i, p)| match &prefix {
            Some(pre) if i > 0 && modal_prefix(&p).is_none() => format!("{pre} {p}"),
            _ => p,
        })
        .collect()
}

/// Assign each sentence of each parent level to the child rule(s) it shares
/// the most content tokens with. Sentences without any overlap go to every child.
pub fn distribute(children: &[String], parents: &[SubCondition]) -> Vec<Vec<SubCondition>> {
    let mut out = vec![Vec::new(); children.len()];
    for parent in parents {
        let mut pieces: Vec<Vec<&str>> = vec![Vec::new(); children.len()];
        let mut sents = sentences(&parent.quality);
        if sents.is_empty() {
            sents.push(parent.quality.as_str());
        }
        for sentence in sents {
            let overlaps: Vec<usize> = children
                .iter()
                .map(|c| shared_tokens(c, sentence))
                .collect();
            let best = overlaps.iter().copied().max().unwrap_or(0);
            for (i, o) in overlaps.iter().enumerate() {
                if *o == best {
                    pieces[i].push(sentence);
                }
            }
        }
        for (i, piece) in pieces.into_iter().enumerate() {
            if !piece.is_empty() {
                out[i].push(SubCondition::new(piece.join(" "), parent.score));
            }
        }
    }
    out
}

/// Level indices ordered by descending score; equal scores keep their order.
fn ranked_levels(levels: &[SubCondition]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..levels.len()).collect();
    idx.sort_by(|a, b| levels[*b].score.total_cmp(&levels[*a].score));
    idx
}

pub fn judge(input: &SsrInput) -> SsrOutput {
    if content_tokens(&input.answer_segment).is_empty() {
        return SsrOutput {
            fulfilled: 0.0,
            matched_level: None,
            lqap: 0.0,
            related_content: String::new(),
            reason: format!(
                "The answer contains nothing that addresses \"{}\".",
                input.criteria.trim()
            ),
        };
    }

    let cov = coverage(&input.criteria, &input.answer_segment);
    let terms = content_tokens(&input.criteria).len();
    let tier = if cov >= TAU_FULL {
        Some(0)
    } else if cov >= TAU_PARTIAL {
        Some(1)
    } else {
        None
    };

    let related = sentences(&input.answer_segment)
        .into_iter()
        .map(|s| (shared_tokens(&input.criteria, s), s))
        .filter(|(n, _)| *n > 0)
        .fold(None::<(usize, &str)>, |best, cur| match best {
            Some(b) if b.0 >= cur.0 => Some(b),
            _ => Some(cur),
        })
        .map(|(_, s)| s.to_string())
        .unwrap_or_default();

    let Some(tier) = tier else {
        return SsrOutput {
            fulfilled: 0.0,
            matched_level: None,
            lqap: 0.0,
            related_content: related,
            reason: format!(
                "Only {:.0}% of the key terms of \"{}\" appear in the answer, below the {:.0}% needed to count as addressed.",
                cov * 100.0,
                input.criteria.trim(),
                TAU_PARTIAL * 100.0
            ),
        };
    };

    let fulfilled = if input.continuous { cov } else { 1.0 };
    let matched = if input.subconditions.is_empty() {
        None
    } else {
        let ranked = ranked_levels(&input.subconditions);
        Some(ranked[tier.min(ranked.len() - 1)])
    };
    let coverage_word = if tier == 0 { "fully" } else { "partially" };
    let level_note = match matched {
        Some(i) => format!(
            " It matches the level \"{}\" ({:.0}%).",
            input.subconditions[i].quality,
            input.subconditions[i].score * 100.0
        ),
        None => String::new(),
    };
    SsrOutput {
        fulfilled,
        matched_level: matched,
        lqap: 1.0,
        related_content: related,
        reason: format!(
            "The answer {coverage_word} addresses \"{}\": {:.0}% of its {terms} key terms are present.{level_note}",
            input.criteria.trim(),
            cov * 100.0
        ),
    }
}

/// Paragraphs relevant to the row rule, or the whole answer when no single
/// paragraph stands out.
pub fn segment(answer: &str, row_rule: &str) -> String {
    let paras = paragraphs(answer);
    if paras.len() <= 1 {
        return answer.to_string();
    }
    let kept: Vec<&str> = paras
        .into_iter()
        .filter(|p| coverage(row_rule, p) >= TAU_SEG)
        .collect();
    if kept.is_empty() {
        answer.to_string()
    } else {
        kept.join("\n\n")
    }
}

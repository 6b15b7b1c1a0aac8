//! Request payloads and output schemas for the four downstream tasks.
//!
//! Outputs are decoded with unknown fields denied and then checked against
//! the request that produced them, so no partially valid payload is released.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Downstream task kinds routed through the gateway.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TaskKind {
    /// Criteria topic modeling: split a rule into simpler rules.
    Ctm,
    /// Criteria sub-condition classification: distribute quality levels to child rules.
    Csc,
    /// Simplified-rule scoring and reasoning.
    Ssr,
    /// Answer segment retrieval for a rubric row.
    Segment,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Ctm => "CTM",
            TaskKind::Csc => "CSC",
            TaskKind::Ssr => "SSR",
            TaskKind::Segment => "SEGMENT",
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A quality level attached to a tree node: description plus score fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubCondition {
    pub quality: String,
    pub score: f64,
}

impl SubCondition {
    pub fn new(quality: impl Into<String>, score: f64) -> Self {
        Self {
            quality: quality.into(),
            score,
        }
    }
}

/// The three rule-division criteria handed to the CTM task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleDivisionPolicy {
    pub criteria: Vec<String>,
}

impl Default for RuleDivisionPolicy {
    fn default() -> Self {
        Self {
            criteria: vec![
                "Together, the simpler rules must rebuild the original rule without loss.".into(),
                "Each simpler rule must cover a distinct aspect that does not overlap the others."
                    .into(),
                "The simpler rules should carry roughly equal weight in scoring.".into(),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtmInput {
    pub criteria: String,
    pub policy: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CtmOutput {
    pub rules: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CscInput {
    pub child_rules: Vec<String>,
    pub parent_subconditions: Vec<SubCondition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CscOutput {
    pub assignments: Vec<Vec<SubCondition>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsrInput {
    pub answer_segment: String,
    pub criteria: String,
    pub subconditions: Vec<SubCondition>,
    /// When set, `fulfilled` may be any fraction instead of 0 or 1.
    #[serde(default)]
    pub continuous: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsrOutput {
    pub fulfilled: f64,
    pub matched_level: Option<usize>,
    pub lqap: f64,
    pub related_content: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentInput {
    pub answer: String,
    pub row_rule: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentOutput {
    pub segment: String,
}

/// Leaf-level fulfillment outcome of the SSR task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrVerdict {
    /// 0 or 1 in binary mode; a fraction in continuous mode.
    pub fulfilled: f64,
    pub matched_level_index: Option<usize>,
    pub lqap: f64,
    pub related_content: String,
    pub reason_text: String,
}

impl From<SsrOutput> for SrVerdict {
    fn from(o: SsrOutput) -> Self {
        Self {
            fulfilled: o.fulfilled,
            matched_level_index: o.matched_level,
            lqap: o.lqap,
            related_content: o.related_content,
            reason_text: o.reason,
        }
    }
}

impl From<&SrVerdict> for SsrOutput {
    fn from(v: &SrVerdict) -> Self {
        Self {
            fulfilled: v.fulfilled,
            matched_level: v.matched_level_index,
            lqap: v.lqap,
            related_content: v.related_content.clone(),
            reason: v.reason_text.clone(),
        }
    }
}

fn decode<T: DeserializeOwned>(kind: TaskKind, value: &Value) -> Result<T, String> {
    serde_json::from_value(value.clone())
        .map_err(|e| format!("{kind} output does not match schema: {e}"))
}

fn unit(x: f64) -> bool {
    x.is_finite() && (0.0..=1.0).contains(&x)
}

fn score_key(x: f64) -> u64 {
    x.to_bits()
}

/// Check a raw backend payload against the task schema and the request it answers.
pub fn validate_output(kind: TaskKind, request: &Value, output: &Value) -> Result<Value, String> {
    match kind {
        TaskKind::Ctm => {
            let out: CtmOutput = decode(kind, output)?;
            if out.rules.is_empty() {
                return Err("CTM output has no rules".into());
            }
            if out.rules.iter().any(|r| r.trim().is_empty()) {
                return Err("CTM output contains an empty rule".into());
            }
        }
        TaskKind::Csc => {
            let input: CscInput = decode(kind, request)?;
            let out: CscOutput = decode(kind, output)?;
            if out.assignments.len() != input.child_rules.len() {
                return Err(format!(
                    "CSC output has {} assignment lists for {} child rules",
                    out.assignments.len(),
                    input.child_rules.len()
                ));
            }
            let parent_scores: Vec<u64> = input
                .parent_subconditions
                .iter()
                .map(|s| score_key(s.score))
                .collect();
            let mut assigned = vec![false; parent_scores.len()];
            for sc in out.assignments.iter().flatten() {
                if sc.quality.trim().is_empty() {
                    return Err("CSC output contains an empty quality description".into());
                }
                let key = score_key(sc.score);
                if !parent_scores.contains(&key) {
                    return Err(format!("CSC output invented score {}", sc.score));
                }
                for (i, p) in parent_scores.iter().enumerate() {
                    if *p == key {
                        assigned[i] = true;
                    }
                }
            }
            if let Some(i) = assigned.iter().position(|a| !a) {
                return Err(format!(
                    "CSC output left parent sub-condition {i} unassigned"
                ));
            }
        }
        TaskKind::Ssr => {
            let input: SsrInput = decode(kind, request)?;
            let out: SsrOutput = decode(kind, output)?;
            if input.continuous {
                if !unit(out.fulfilled) {
                    return Err(format!("SSR fulfilled {} outside [0, 1]", out.fulfilled));
                }
            } else if out.fulfilled != 0.0 && out.fulfilled != 1.0 {
                return Err(format!("SSR fulfilled {} is not 0 or 1", out.fulfilled));
            }
            if !unit(out.lqap) {
                return Err(format!("SSR lqap {} outside [0, 1]", out.lqap));
            }
            if out.fulfilled == 0.0 && out.lqap != 0.0 {
                return Err("SSR reports lqap > 0 for an unmet rule".into());
            }
            if let Some(i) = out.matched_level {
                if i >= input.subconditions.len() {
                    return Err(format!(
                        "SSR matched level {i} but only {} sub-conditions exist",
                        input.subconditions.len()
                    ));
                }
            }
            if out.reason.trim().is_empty() {
                return Err("SSR reason is empty".into());
            }
        }
        TaskKind::Segment => {
            let input: SegmentInput = decode(kind, request)?;
            let out: SegmentOutput = decode(kind, output)?;
            let foreign = out
                .segment
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .find(|l| !input.answer.contains(l));
            if let Some(line) = foreign {
                return Err(format!(
                    "SEGMENT output is not an excerpt of the answer: {line:?}"
                ));
            }
        }
    }
    Ok(output.clone())
}

//! Reason propagation and the two-part answer report.

use std::collections::BTreeMap;

use minijinja::{Environment, Value as TemplateValue};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rkt::RktNode;

pub const DEFAULT_TEMPLATE: &str = include_str!("../templates/report/default.j2");

/// Tolerance when deciding that a leaf reached its maximum.
const FULL_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("leaf {0} has no verdict")]
    MissingVerdict(String),
    #[error("report template failed: {0}")]
    Template(String),
}

/// One leaf's contribution and the reason behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReasonEntry {
    pub node_id: String,
    pub score_source_id: u32,
    /// Share of the row's score source this leaf controls.
    pub influence_on_scoring: f64,
    /// Contribution to the total score, as a fraction of the maximum.
    pub rewarded_score: f64,
    pub related_content: String,
    pub reason_text: String,
}

fn leaf_entry(leaf: &RktNode) -> Result<ReasonEntry, ReportError> {
    let score = leaf
        .node_score
        .ok_or_else(|| ReportError::MissingVerdict(leaf.id.clone()))?;
    let (related_content, reason_text) = match (&leaf.verdict, &leaf.unscored) {
        (Some(v), _) => (v.related_content.clone(), v.reason_text.clone()),
        (None, Some(cause)) => (String::new(), format!("not scored, counted as 0: {cause}")),
        (None, None) => return Err(ReportError::MissingVerdict(leaf.id.clone())),
    };
    let influence = leaf.influence_on_scoring();
    Ok(ReasonEntry {
        node_id: leaf.id.clone(),
        score_source_id: leaf.score_source_id,
        influence_on_scoring: influence,
        rewarded_score: influence * score * leaf.score_source,
        related_content,
        reason_text,
    })
}

/// Reasons per node: a leaf's own entry, or its children's lists concatenated
/// in child order.
pub fn propagate_reasons(
    graded: &RktNode,
) -> Result<BTreeMap<String, Vec<ReasonEntry>>, ReportError> {
    fn visit(
        node: &RktNode,
        out: &mut BTreeMap<String, Vec<ReasonEntry>>,
    ) -> Result<Vec<ReasonEntry>, ReportError> {
        let list = if node.leaf {
            vec![leaf_entry(node)?]
        } else {
            let mut list = Vec::new();
            for child in &node.children {
                list.extend(visit(child, out)?);
            }
            list
        };
        out.insert(node.id.clone(), list.clone());
        Ok(list)
    }
    let mut out = BTreeMap::new();
    visit(graded, &mut out)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafStatus {
    Satisfied,
    Partial,
    Unmet,
}

pub fn classify(score: f64, max: f64) -> LeafStatus {
    if score <= 0.0 {
        LeafStatus::Unmet
    } else if score >= max - FULL_TOLERANCE {
        LeafStatus::Satisfied
    } else {
        LeafStatus::Partial
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafFinding {
    pub node_id: String,
    pub rule: String,
    pub status: LeafStatus,
    /// Leaf score on its own scale.
    pub score: f64,
    /// Highest score the leaf could reach.
    pub max: f64,
    pub achieved_level: Option<String>,
    pub top_level: Option<String>,
    pub rewarded_score: f64,
    pub reason_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowAnalysis {
    pub row_id: u32,
    pub rule: String,
    /// Row contribution to the total.
    pub score: f64,
    /// Row score source.
    pub max: f64,
    pub satisfied: Vec<LeafFinding>,
    pub partial: Vec<LeafFinding>,
    pub unmet: Vec<LeafFinding>,
}

impl RowAnalysis {
    pub fn leaf_ids(&self) -> impl Iterator<Item = &str> {
        self.satisfied
            .iter()
            .chain(&self.partial)
            .chain(&self.unmet)
            .map(|f| f.node_id.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementPoint {
    pub row_id: u32,
    pub node_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub total_score: f64,
    pub scaled_score: f64,
    pub max_score: f64,
    pub satisfied: usize,
    pub partial: usize,
    pub unmet: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub analysis_sections: Vec<RowAnalysis>,
    pub improvement_points: Vec<ImprovementPoint>,
    pub totals: Totals,
    /// Plain-text rendering of the above.
    pub text: String,
}

fn finding(leaf: &RktNode, entry: &ReasonEntry) -> Result<LeafFinding, ReportError> {
    let score = leaf
        .node_score
        .ok_or_else(|| ReportError::MissingVerdict(leaf.id.clone()))?;
    let max = leaf.max_attainable();
    let achieved_level = leaf
        .verdict
        .as_ref()
        .filter(|v| v.fulfilled > 0.0)
        .and_then(|v| {
            let idx = v
                .matched_level_index
                .or_else(|| crate::scoring::leaf_score(v, &leaf.sub_conditions).level_index)?;
            leaf.sub_conditions.get(idx)
        })
        .map(|s| s.quality.clone());
    // first level wins a tie, matching rubric order
    let top_level = leaf
        .sub_conditions
        .iter()
        .fold(
            None::<&crate::gateway::SubCondition>,
            |best, s| match best {
                Some(b) if b.score >= s.score => Some(b),
                _ => Some(s),
            },
        )
        .map(|s| s.quality.clone());
    Ok(LeafFinding {
        node_id: leaf.id.clone(),
        rule: leaf.criteria.clone(),
        status: classify(score, max),
        score,
        max,
        achieved_level,
        top_level,
        rewarded_score: entry.rewarded_score,
        reason_text: entry.reason_text.clone(),
    })
}

fn improvement(row_id: u32, f: &LeafFinding) -> ImprovementPoint {
    let target = f
        .top_level
        .as_deref()
        .map(|t| format!(" Aim for: {t}"))
        .unwrap_or_default();
    let text = match f.status {
        LeafStatus::Partial => format!(
            "Row {row_id}, {}: strengthen \"{}\"; reached {:.4} of {:.4}.{target}",
            f.node_id, f.rule, f.score, f.max
        ),
        _ => format!(
            "Row {row_id}, {}: address \"{}\", which is missing.{target}",
            f.node_id, f.rule
        ),
    };
    ImprovementPoint {
        row_id,
        node_id: f.node_id.clone(),
        text,
    }
}

/// Build the structured report for a graded tree with the default template.
pub fn render_report(
    graded: &RktNode,
    reasons: &BTreeMap<String, Vec<ReasonEntry>>,
) -> Result<Report, ReportError> {
    render_report_with(graded, reasons, DEFAULT_TEMPLATE)
}

/// As [`render_report`], with a caller-supplied template source.
pub fn render_report_with(
    graded: &RktNode,
    reasons: &BTreeMap<String, Vec<ReasonEntry>>,
    template: &str,
) -> Result<Report, ReportError> {
    let mut sections = Vec::with_capacity(graded.children.len());
    let mut improvement_points = Vec::new();
    for row in &graded.children {
        let entries = match reasons.get(&row.id) {
            Some(e) => e.clone(),
            None => propagate_reasons(row)?.remove(&row.id).unwrap_or_default(),
        };
        let mut analysis = RowAnalysis {
            row_id: row.score_source_id,
            rule: row.criteria.clone(),
            score: entries.iter().map(|e| e.rewarded_score).sum(),
            max: row.score_source,
            satisfied: vec![],
            partial: vec![],
            unmet: vec![],
        };
        for (leaf, entry) in row.leaves().into_iter().zip(&entries) {
            let f = finding(leaf, entry)?;
            match f.status {
                LeafStatus::Satisfied => analysis.satisfied.push(f),
                LeafStatus::Partial => {
                    improvement_points.push(improvement(analysis.row_id, &f));
                    analysis.partial.push(f)
                }
                LeafStatus::Unmet => {
                    improvement_points.push(improvement(analysis.row_id, &f));
                    analysis.unmet.push(f)
                }
            }
        }
        sections.push(analysis);
    }
    let total_score: f64 = sections.iter().map(|s| s.score).sum();
    let max_score = graded.max_score.unwrap_or(1.0);
    let totals = Totals {
        total_score,
        scaled_score: total_score * max_score,
        max_score,
        satisfied: sections.iter().map(|s| s.satisfied.len()).sum(),
        partial: sections.iter().map(|s| s.partial.len()).sum(),
        unmet: sections.iter().map(|s| s.unmet.len()).sum(),
    };

    let mut env = Environment::new();
    env.set_keep_trailing_newline(true);
    env.add_filter("f4", |v: f64| format!("{v:.4}"));
    env.add_template("report", template)
        .map_err(|e| ReportError::Template(e.to_string()))?;
    let text = env
        .get_template("report")
        .and_then(|t| {
            t.render(minijinja::context! {
                rows => TemplateValue::from_serialize(&sections),
                improvement_points => TemplateValue::from_serialize(&improvement_points),
                totals => TemplateValue::from_serialize(&totals),
            })
        })
        .map_err(|e| ReportError::Template(e.to_string()))?;

    Ok(Report {
        analysis_sections: sections,
        improvement_points,
        totals,
        text,
    })
}

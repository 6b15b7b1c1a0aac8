//! Rubric knowledge tree.
//!
//! The root stands for the whole rubric, its children are the rubric rows and
//! every leaf is a simplified rule (SR). Contextual attributes are fixed at
//! construction; scoring attributes (`node_score`, `reasons`, `verdict`) are
//! only present on graded copies.

mod builder;
mod cache;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use builder::{build_rkt, expand_node, BuildConfig, BuildError, BuildOutput};
pub use cache::{write_atomic, TreeCache};

use crate::gateway::{SrVerdict, SubCondition};
use crate::report::ReasonEntry;
use crate::rubric::SCORE_SOURCE_TOLERANCE;

pub const SCHEMA_VERSION: u64 = 1;

const INFLUENCE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum RktError {
    #[error("malformed tree document: {0}")]
    Malformed(String),
    #[error("unsupported schema_version {0}")]
    SchemaVersion(String),
    #[error("tree invariant violated: {}", .0.join("; "))]
    Invariant(Vec<String>),
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RktNode {
    pub id: String,
    pub leaf: bool,
    pub criteria: String,
    pub criteria_simplified_version: Vec<String>,
    pub separate_rule_number: usize,
    /// Score source of the row this node belongs to (1.0 at the root).
    pub score_source: f64,
    /// Row id for row nodes and their descendants, 0 at the root.
    pub score_source_id: u32,
    /// Weight among siblings.
    pub influence_relative: f64,
    /// Share of the total score awarded when this node's rule is fully met.
    pub influence_absolute: f64,
    pub sub_conditions: Vec<SubCondition>,
    pub children: Vec<RktNode>,
    /// Leaf kept as an SR only because the depth cap was hit.
    #[serde(default, skip_serializing_if = "is_false")]
    pub forced_sr: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasons: Option<Vec<ReasonEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<SrVerdict>,
    /// Exam maximum score; only carried by the root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_score: Option<f64>,
    /// Set when the leaf could not be scored and was counted as 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unscored: Option<String>,
}

impl RktNode {
    /// Fraction of this node's score source awarded when its rule is met.
    pub fn influence_on_scoring(&self) -> f64 {
        if self.score_source > 0.0 {
            self.influence_absolute / self.score_source
        } else {
            0.0
        }
    }

    /// Highest score the node can reach on its own scale.
    pub fn max_attainable(&self) -> f64 {
        self.sub_conditions
            .iter()
            .map(|s| s.score)
            .reduce(f64::max)
            .unwrap_or(1.0)
    }

    /// Depth-first pre-order traversal with depths (root = 0).
    pub fn walk(&self) -> Vec<(usize, &RktNode)> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, self)];
        while let Some((depth, node)) = stack.pop() {
            out.push((depth, node));
            for child in node.children.iter().rev() {
                stack.push((depth + 1, child));
            }
        }
        out
    }

    /// Leaves in depth-first, child-index order.
    pub fn leaves(&self) -> Vec<&RktNode> {
        self.walk()
            .into_iter()
            .map(|(_, n)| n)
            .filter(|n| n.leaf)
            .collect()
    }

    pub fn find(&self, id: &str) -> Option<&RktNode> {
        self.walk().into_iter().map(|(_, n)| n).find(|n| n.id == id)
    }

    pub fn node_count(&self) -> usize {
        self.walk().len()
    }

    pub fn max_depth(&self) -> usize {
        self.walk().into_iter().map(|(d, _)| d).max().unwrap_or(0)
    }

    /// Whether any scoring attribute is present anywhere in the tree.
    pub fn is_graded(&self) -> bool {
        self.walk().iter().any(|(_, n)| n.node_score.is_some())
    }

    /// Copy of the tree with every scoring attribute cleared.
    pub fn without_scores(&self) -> RktNode {
        let mut copy = self.clone();
        fn clear(n: &mut RktNode) {
            n.node_score = None;
            n.reasons = None;
            n.verdict = None;
            n.unscored = None;
            n.children.iter_mut().for_each(clear);
        }
        clear(&mut copy);
        copy
    }

    /// Check every structural and influence invariant, reporting all violations.
    pub fn check_invariants(&self) -> Result<(), RktError> {
        let mut issues = Vec::new();
        let mut ids = BTreeSet::new();
        self.check_node(None, &mut ids, &mut issues);
        if issues.is_empty() {
            Ok(())
        } else {
            Err(RktError::Invariant(issues))
        }
    }

    fn check_node<'a>(
        &'a self,
        parent: Option<&RktNode>,
        ids: &mut BTreeSet<&'a str>,
        issues: &mut Vec<String>,
    ) {
        let id = &self.id;
        if !ids.insert(id.as_str()) {
            issues.push(format!("duplicate id {id}"));
        }
        if self.leaf != self.children.is_empty() {
            issues.push(format!("{id}: leaf flag disagrees with children"));
        }
        if self.separate_rule_number != self.criteria_simplified_version.len() {
            issues.push(format!(
                "{id}: separate_rule_number does not match simplified rules"
            ));
        }
        if !self.leaf && self.children.len() != self.separate_rule_number {
            issues.push(format!(
                "{id}: {} children for {} simplified rules",
                self.children.len(),
                self.separate_rule_number
            ));
        }
        if !(self.influence_relative > 0.0 && self.influence_relative <= 1.0 + INFLUENCE_TOLERANCE)
        {
            issues.push(format!(
                "{id}: influence_relative {} outside (0, 1]",
                self.influence_relative
            ));
        }
        if let Some(score) = self.node_score {
            if !(0.0..=1.0 + INFLUENCE_TOLERANCE).contains(&score) {
                issues.push(format!("{id}: node_score {score} outside [0, 1]"));
            }
        }
        match parent {
            None => {
                if (self.influence_absolute - 1.0).abs() > INFLUENCE_TOLERANCE {
                    issues.push(format!("{id}: root influence_absolute must be 1"));
                }
            }
            Some(p) => {
                let expected = p.influence_absolute * self.influence_relative;
                if (self.influence_absolute - expected).abs() > INFLUENCE_TOLERANCE {
                    issues.push(format!(
                        "{id}: influence_absolute {} != parent × relative {expected}",
                        self.influence_absolute
                    ));
                }
            }
        }
        if !self.leaf {
            let sum: f64 = self.children.iter().map(|c| c.influence_relative).sum();
            // row weights are score sources, validated to a looser tolerance
            let tolerance = if parent.is_none() {
                SCORE_SOURCE_TOLERANCE
            } else {
                INFLUENCE_TOLERANCE
            };
            if (sum - 1.0).abs() > tolerance {
                issues.push(format!("{id}: children influence_relative sums to {sum}"));
            }
        }
        for (i, child) in self.children.iter().enumerate() {
            let expected = format!("{id}.{i}");
            if child.id != expected {
                issues.push(format!(
                    "child {i} of {id} has id {} (expected {expected})",
                    child.id
                ));
            }
            if parent.is_some() && child.score_source_id != self.score_source_id {
                issues.push(format!(
                    "{}: score_source_id differs from its row",
                    child.id
                ));
            }
            child.check_node(Some(self), ids, issues);
        }
    }
}

/// Serialize a tree as a document with a top-level `schema_version`.
pub fn serialize_rkt(root: &RktNode) -> String {
    #[derive(Serialize)]
    struct Document<'a> {
        schema_version: u64,
        #[serde(flatten)]
        root: &'a RktNode,
    }
    serde_json::to_string_pretty(&Document {
        schema_version: SCHEMA_VERSION,
        root,
    })
    .expect("tree serializes")
}

/// Parse a tree document and verify its invariants.
pub fn deserialize_rkt(document: &str) -> Result<RktNode, RktError> {
    let mut value: Value =
        serde_json::from_str(document).map_err(|e| RktError::Malformed(e.to_string()))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| RktError::Malformed("top level must be an object".into()))?;
    match obj.remove("schema_version") {
        Some(v) if v.as_u64() == Some(SCHEMA_VERSION) => {}
        Some(v) => return Err(RktError::SchemaVersion(v.to_string())),
        None => return Err(RktError::Malformed("missing schema_version".into())),
    }
    let root: RktNode =
        serde_json::from_value(value).map_err(|e| RktError::Malformed(e.to_string()))?;
    root.check_invariants()?;
    Ok(root)
}

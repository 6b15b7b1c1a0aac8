//! Grading an answer against a built tree.
//!
//! Leaves are classified through the gateway, each leaf scores
//! `fulfilled × lqap × ls` for its matched level, and internal nodes take the
//! influence-weighted sum of their children. A row contributes its aggregate
//! times its score source; the total is the sum over rows.

use std::collections::BTreeMap;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::OnceCell;

use crate::gateway::{Gateway, GatewayError, SubCondition};
use crate::report::{self, Report, ReportError};
use crate::rkt::RktNode;
use crate::text::word_count;

pub use crate::gateway::SrVerdict;

#[derive(Debug, Error, PartialEq)]
pub enum GradingError {
    #[error("cannot grade: {0}")]
    Precondition(String),
    #[error("leaf {node_id} could not be scored: {source}")]
    Leaf {
        node_id: String,
        #[source]
        source: GatewayError,
    },
    #[error("node {0} has no score")]
    Unscored(String),
    #[error(transparent)]
    Report(#[from] ReportError),
}

impl GradingError {
    pub fn is_gateway(&self) -> bool {
        matches!(self, GradingError::Leaf { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreConfig {
    /// Score leaves that fail as 0 (with a flag) instead of failing the answer.
    pub partial_ok: bool,
    /// Leaf verdicts requested at once for one answer.
    pub concurrency: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            partial_ok: false,
            concurrency: 8,
        }
    }
}

/// How a verdict turns into a leaf score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeafScore {
    pub score: f64,
    pub level_index: Option<usize>,
    pub effective_lqap: f64,
    pub effective_ls: f64,
}

/// Choose among `(lqap, ls)` candidates: highest lqap, ties to the higher ls,
/// then to the earlier index.
pub fn select_level(candidates: &[(f64, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (lqap, ls)) in candidates.iter().enumerate() {
        best = match best {
            Some(b) => {
                let (bl, bs) = candidates[b];
                if *lqap > bl || (*lqap == bl && *ls > bs) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
            None => Some(i),
        };
    }
    best
}

pub fn leaf_score(verdict: &SrVerdict, sub_conditions: &[SubCondition]) -> LeafScore {
    if verdict.fulfilled <= 0.0 {
        return LeafScore {
            score: 0.0,
            level_index: None,
            effective_lqap: 0.0,
            effective_ls: 0.0,
        };
    }
    if sub_conditions.is_empty() {
        return LeafScore {
            score: verdict.fulfilled,
            level_index: None,
            effective_lqap: 1.0,
            effective_ls: 1.0,
        };
    }
    let index = verdict
        .matched_level_index
        .filter(|i| *i < sub_conditions.len())
        .or_else(|| {
            let candidates: Vec<(f64, f64)> = sub_conditions
                .iter()
                .map(|s| (verdict.lqap, s.score))
                .collect();
            select_level(&candidates)
        })
        .expect("non-empty sub-conditions always yield a level");
    let ls = sub_conditions[index].score;
    LeafScore {
        score: verdict.fulfilled * verdict.lqap * ls,
        level_index: Some(index),
        effective_lqap: verdict.lqap,
        effective_ls: ls,
    }
}

/// Outcome of asking the gateway about one leaf.
#[derive(Debug, Clone, PartialEq)]
pub enum LeafEvaluation {
    Scored(SrVerdict),
    Failed(String),
}

/// Per-answer leaf scorer sharing one segment lookup per rubric row.
pub struct Scorer<'a> {
    root: &'a RktNode,
    gateway: &'a Gateway,
    answer: &'a str,
    segments: BTreeMap<u32, OnceCell<String>>,
}

impl<'a> Scorer<'a> {
    pub fn new(root: &'a RktNode, gateway: &'a Gateway, answer: &'a str) -> Self {
        let segments = root
            .children
            .iter()
            .map(|row| (row.score_source_id, OnceCell::new()))
            .collect();
        Self {
            root,
            gateway,
            answer,
            segments,
        }
    }

    async fn segment(&self, row_id: u32) -> Result<String, GatewayError> {
        let row_rule = self
            .root
            .children
            .iter()
            .find(|r| r.score_source_id == row_id)
            .map(|r| r.criteria.as_str())
            .unwrap_or(self.root.criteria.as_str());
        match self.segments.get(&row_id) {
            Some(cell) => cell
                .get_or_try_init(|| self.gateway.segment_answer(self.answer, row_rule))
                .await
                .cloned(),
            None => self.gateway.segment_answer(self.answer, row_rule).await,
        }
    }

    /// Classify one leaf against the answer segment of its row.
    pub async fn score_leaf(&self, leaf: &RktNode) -> Result<(SrVerdict, LeafScore), GradingError> {
        if !leaf.leaf {
            return Err(GradingError::Precondition(format!(
                "{} is not a leaf",
                leaf.id
            )));
        }
        let wrap = |source| GradingError::Leaf {
            node_id: leaf.id.clone(),
            source,
        };
        let segment = self.segment(leaf.score_source_id).await.map_err(wrap)?;
        let verdict = self
            .gateway
            .ssr(&segment, &leaf.criteria, &leaf.sub_conditions)
            .await
            .map_err(wrap)?;
        let score = leaf_score(&verdict, &leaf.sub_conditions);
        Ok((verdict, score))
    }
}

/// Influence-weighted sum of the children's scores.
pub fn aggregate(node: &RktNode) -> Result<f64, GradingError> {
    if node.leaf {
        return node
            .node_score
            .ok_or_else(|| GradingError::Unscored(node.id.clone()));
    }
    node.children.iter().try_fold(0.0, |acc, child| {
        let score = child
            .node_score
            .ok_or_else(|| GradingError::Unscored(child.id.clone()))?;
        Ok(acc + child.influence_relative * score)
    })
}

/// A row's contribution to the total, in `[0, score_source]`.
pub fn row_score(row_node: &RktNode) -> Result<f64, GradingError> {
    Ok(aggregate(row_node)? * row_node.score_source)
}

/// Attach verdicts to a copy of the tree and aggregate bottom-up.
///
/// Leaves without an evaluation, or with a failed one, are an error unless
/// `partial_ok` is set, in which case they score 0 and carry a flag.
pub fn annotate(
    root: &RktNode,
    evaluations: &BTreeMap<String, LeafEvaluation>,
    partial_ok: bool,
) -> Result<RktNode, GradingError> {
    fn visit(
        node: &mut RktNode,
        evaluations: &BTreeMap<String, LeafEvaluation>,
        partial_ok: bool,
    ) -> Result<(), GradingError> {
        node.node_score = None;
        node.verdict = None;
        node.unscored = None;
        node.reasons = None;
        if node.leaf {
            match evaluations.get(&node.id) {
                Some(LeafEvaluation::Scored(verdict)) => {
                    node.node_score = Some(leaf_score(verdict, &node.sub_conditions).score);
                    node.verdict = Some(verdict.clone());
                }
                Some(LeafEvaluation::Failed(cause)) if partial_ok => {
                    node.node_score = Some(0.0);
                    node.unscored = Some(cause.clone());
                }
                None if partial_ok => {
                    node.node_score = Some(0.0);
                    node.unscored = Some("no verdict".into());
                }
                _ => return Err(GradingError::Unscored(node.id.clone())),
            }
            return Ok(());
        }
        for child in &mut node.children {
            visit(child, evaluations, partial_ok)?;
        }
        node.node_score = Some(aggregate(node)?);
        Ok(())
    }
    let mut copy = root.clone();
    visit(&mut copy, evaluations, partial_ok)?;
    Ok(copy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub row_id: u32,
    pub score_source_id: u32,
    /// Contribution to the total, as a fraction of the maximum score.
    pub score: f64,
    /// The row's score source.
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeResult {
    pub score: f64,
    pub leaf: bool,
    pub influence_absolute: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMeta {
    pub backend_id: String,
    /// Absent for deterministic runs.
    pub timestamp: Option<String>,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
}

/// Persisted grading outcome for one answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradingResult {
    pub rubric_id: String,
    pub answer_id: String,
    /// Fraction of the maximum score, in `[0, 1]`.
    pub total_score: f64,
    /// `total_score × max_score`.
    pub scaled_score: f64,
    pub max_score: f64,
    pub answer_words: usize,
    pub rows: Vec<RowResult>,
    pub nodes: BTreeMap<String, NodeResult>,
    pub report: Report,
    /// The graded tree with every scoring attribute set.
    pub tree: RktNode,
    pub run_meta: RunMeta,
}

impl GradingResult {
    pub fn per_row_scores(&self) -> BTreeMap<u32, f64> {
        self.rows.iter().map(|r| (r.row_id, r.score)).collect()
    }

    pub fn per_node_scores(&self) -> BTreeMap<String, f64> {
        self.nodes
            .iter()
            .map(|(k, v)| (k.clone(), v.score))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("grading result serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Build the result document from an annotated tree.
pub fn assemble(
    annotated: RktNode,
    answer: &str,
    run_meta: RunMeta,
) -> Result<GradingResult, GradingError> {
    let reasons = report::propagate_reasons(&annotated)?;
    let mut tree = annotated;
    fn attach(node: &mut RktNode, reasons: &BTreeMap<String, Vec<report::ReasonEntry>>) {
        node.reasons = reasons.get(&node.id).cloned();
        node.children.iter_mut().for_each(|c| attach(c, reasons));
    }
    attach(&mut tree, &reasons);

    let mut rows = Vec::with_capacity(tree.children.len());
    for row in &tree.children {
        rows.push(RowResult {
            row_id: row.score_source_id,
            score_source_id: row.score_source_id,
            score: row_score(row)?,
            max: row.score_source,
        });
    }
    let total_score: f64 = rows.iter().map(|r| r.score).sum();
    let max_score = tree.max_score.unwrap_or(1.0);
    let nodes = tree
        .walk()
        .into_iter()
        .map(|(_, n)| {
            let score = n
                .node_score
                .ok_or_else(|| GradingError::Unscored(n.id.clone()))?;
            Ok((
                n.id.clone(),
                NodeResult {
                    score,
                    leaf: n.leaf,
                    influence_absolute: n.influence_absolute,
                },
            ))
        })
        .collect::<Result<BTreeMap<_, _>, GradingError>>()?;
    let report = report::render_report(&tree, &reasons)?;
    Ok(GradingResult {
        rubric_id: tree.id.clone(),
        answer_id: String::new(),
        total_score,
        scaled_score: total_score * max_score,
        max_score,
        answer_words: word_count(answer),
        rows,
        nodes,
        report,
        tree,
        run_meta,
    })
}

/// Grade one answer: classify all leaves (bounded concurrency), aggregate,
/// propagate reasons and render the report.
pub async fn score_answer(
    root: &RktNode,
    answer: &str,
    gateway: &Gateway,
    config: &ScoreConfig,
) -> Result<GradingResult, GradingError> {
    if root.leaf || root.children.is_empty() {
        return Err(GradingError::Precondition("tree has no rows".into()));
    }
    let scorer = Scorer::new(root, gateway, answer);
    let leaves = root.leaves();
    let outcomes: Vec<_> = stream::iter(leaves.iter().map(|leaf| scorer.score_leaf(leaf)))
        .buffered(config.concurrency.max(1))
        .collect()
        .await;

    let mut evaluations = BTreeMap::new();
    for (leaf, outcome) in leaves.iter().zip(outcomes) {
        let evaluation = match outcome {
            Ok((verdict, _)) => LeafEvaluation::Scored(verdict),
            Err(e) if config.partial_ok => {
                tracing::warn!(leaf = %leaf.id, error = %e, "leaf left unscored");
                LeafEvaluation::Failed(e.to_string())
            }
            Err(e) => return Err(e),
        };
        evaluations.insert(leaf.id.clone(), evaluation);
    }

    let annotated = annotate(root, &evaluations, config.partial_ok)?;
    let run_meta = RunMeta {
        backend_id: gateway.backend_id().to_string(),
        timestamp: None,
        config_hash: crate::json_digest(&(config, gateway.config().continuous_sp))[..16]
            .to_string(),
        run_id: None,
    };
    assemble(annotated, answer, run_meta)
}

use futures::future::{try_join_all, BoxFuture};
use futures::FutureExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::RktNode;
use crate::gateway::{Gateway, GatewayError, SubCondition};
use crate::rubric::Rubric;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BuildConfig {
    /// Nodes at this depth (root = 0) are never expanded further.
    pub depth_cap: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self { depth_cap: 4 }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum BuildError {
    #[error("cannot build tree: {0}")]
    Precondition(String),
    #[error("gateway failed while building node {node_id}: {source}")]
    Gateway {
        node_id: String,
        #[source]
        source: GatewayError,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutput {
    pub root: RktNode,
    /// One entry per leaf forced to be an SR by the depth cap.
    pub warnings: Vec<String>,
}

fn gateway_err(node_id: &str) -> impl FnOnce(GatewayError) -> BuildError + '_ {
    move |source| BuildError::Gateway {
        node_id: node_id.to_string(),
        source,
    }
}

fn new_node(
    id: String,
    criteria: String,
    simplified: Vec<String>,
    parent: &RktNode,
    relative: f64,
    sub_conditions: Vec<SubCondition>,
) -> RktNode {
    RktNode {
        id,
        leaf: true,
        criteria,
        separate_rule_number: simplified.len(),
        criteria_simplified_version: simplified,
        score_source: parent.score_source,
        score_source_id: parent.score_source_id,
        influence_relative: relative,
        influence_absolute: parent.influence_absolute * relative,
        sub_conditions,
        children: Vec::new(),
        forced_sr: false,
        node_score: None,
        reasons: None,
        verdict: None,
        max_score: None,
        unscored: None,
    }
}

/// Build the tree for a validated rubric.
///
/// Row nodes weigh in with their score source; below a row, children split
/// their parent's influence equally.
pub async fn build_rkt(
    rubric: &Rubric,
    gateway: &Gateway,
    config: &BuildConfig,
) -> Result<BuildOutput, BuildError> {
    if rubric.rows.is_empty() {
        return Err(BuildError::Precondition("rubric has no rows".into()));
    }
    if config.depth_cap == 0 {
        return Err(BuildError::Precondition(
            "depth_cap must be at least 1".into(),
        ));
    }
    let rules: Vec<String> = rubric.rows.iter().map(|r| r.basic_rule.clone()).collect();
    let mut root = RktNode {
        id: rubric.rubric_id.clone(),
        leaf: false,
        criteria: rules.join("\n"),
        separate_rule_number: rules.len(),
        criteria_simplified_version: rules,
        score_source: 1.0,
        score_source_id: 0,
        influence_relative: 1.0,
        influence_absolute: 1.0,
        sub_conditions: Vec::new(),
        children: Vec::new(),
        forced_sr: false,
        node_score: None,
        reasons: None,
        verdict: None,
        max_score: Some(rubric.max_score),
        unscored: None,
    };

    let rows = rubric.rows.iter().enumerate().map(|(x, row)| {
        let root = &root;
        async move {
            let id = format!("{}.{x}", root.id);
            let simplified = gateway
                .ctm(&row.basic_rule)
                .await
                .map_err(gateway_err(&id))?;
            let mut node = new_node(
                id,
                row.basic_rule.clone(),
                simplified,
                root,
                row.score_source,
                row.levels
                    .iter()
                    .map(|l| SubCondition::new(l.quality_description.clone(), l.score_level))
                    .collect(),
            );
            node.score_source = row.score_source;
            node.score_source_id = row.row_id;
            node.influence_absolute = row.score_source;
            grow(node, 1, gateway, config).await
        }
    });
    let grown = try_join_all(rows).await?;

    let mut warnings = Vec::new();
    for (node, w) in grown {
        root.children.push(node);
        warnings.extend(w);
    }
    Ok(BuildOutput { root, warnings })
}

/// Expand `node` and then its descendants until every leaf is an SR or sits at the cap.
fn grow<'a>(
    node: RktNode,
    depth: usize,
    gateway: &'a Gateway,
    config: &'a BuildConfig,
) -> BoxFuture<'a, Result<(RktNode, Vec<String>), BuildError>> {
    async move {
        if node.separate_rule_number <= 1 {
            return Ok((node, Vec::new()));
        }
        if depth >= config.depth_cap {
            let mut node = node;
            node.forced_sr = true;
            let warning = format!(
                "node {} still has {} simplified rules at depth cap {}; kept as a single rule",
                node.id, node.separate_rule_number, config.depth_cap
            );
            tracing::warn!("{warning}");
            return Ok((node, vec![warning]));
        }
        let mut expanded = expand_node(node, gateway).await?;
        let children = std::mem::take(&mut expanded.children);
        let grown = try_join_all(
            children
                .into_iter()
                .map(|c| grow(c, depth + 1, gateway, config)),
        )
        .await?;
        let mut warnings = Vec::new();
        for (child, w) in grown {
            expanded.children.push(child);
            warnings.extend(w);
        }
        Ok((expanded, warnings))
    }
    .boxed()
}

/// Turn a non-atomic leaf into an internal node with one child per simplified rule.
///
/// Each child is simplified once more (its own CTM call) but not expanded.
pub async fn expand_node(node: RktNode, gateway: &Gateway) -> Result<RktNode, BuildError> {
    if !node.leaf {
        return Err(BuildError::Precondition(format!(
            "node {} is already expanded",
            node.id
        )));
    }
    if node.separate_rule_number <= 1 {
        return Ok(node);
    }
    let assignments = gateway
        .csc(&node.criteria_simplified_version, &node.sub_conditions)
        .await
        .map_err(gateway_err(&node.id))?;
    let relative = 1.0 / node.separate_rule_number as f64;
    let children = node
        .criteria_simplified_version
        .iter()
        .zip(assignments)
        .enumerate()
        .map(|(x, (rule, sub_conditions))| {
            let node = &node;
            async move {
                let id = format!("{}.{x}", node.id);
                let simplified = gateway.ctm(rule).await.map_err(gateway_err(&id))?;
                Ok::<_, BuildError>(new_node(
                    id,
                    rule.clone(),
                    simplified,
                    node,
                    relative,
                    sub_conditions,
                ))
            }
        });
    let children = try_join_all(children).await?;
    let mut node = node;
    node.leaf = false;
    node.children = children;
    Ok(node)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rubric::{AchievementLevel, RubricRow};

    const BERT: &str = "The response must explain the BERT model's architecture and describe at least one of its applications in NLP tasks.";

    fn rubric(rows: Vec<(&str, f64)>) -> Rubric {
        Rubric {
            rubric_id: "exam".into(),
            max_score: 1.0,
            rows: rows
                .into_iter()
                .enumerate()
                .map(|(i, (rule, ss))| RubricRow {
                    row_id: i as u32 + 1,
                    basic_rule: rule.into(),
                    score_source: ss,
                    levels: vec![],
                })
                .collect(),
        }
    }

    #[tokio::test]
    async fn one_row_split_in_two() {
        let out = build_rkt(
            &rubric(vec![(BERT, 1.0)]),
            &Gateway::mock(),
            &BuildConfig::default(),
        )
        .await
        .unwrap();
        let root = &out.root;
        root.check_invariants().unwrap();
        assert_eq!(root.node_count(), 4);
        let row = &root.children[0];
        assert_eq!(row.id, "exam.0");
        assert_eq!(row.children.len(), 2);
        for leaf in &row.children {
            assert!(leaf.leaf);
            assert_eq!(leaf.influence_relative, 0.5);
            assert_eq!(leaf.separate_rule_number, 1);
            assert_eq!(leaf.score_source_id, 1);
        }
        assert_eq!(row.children[1].id, "exam.0.1");
        assert!(out.warnings.is_empty());
    }

    #[tokio::test]
    async fn atomic_rows_give_depth_two_tree() {
        let r = rubric(vec![
            ("Define overfitting.", 0.25),
            ("State the bias variance tradeoff.", 0.75),
        ]);
        let out = build_rkt(&r, &Gateway::mock(), &BuildConfig::default())
            .await
            .unwrap();
        assert_eq!(out.root.max_depth(), 1);
        assert!(out.root.children.iter().all(|c| c.leaf && !c.forced_sr));
        assert_eq!(out.root.children[0].influence_relative, 0.25);
        assert_eq!(out.root.children[1].influence_absolute, 0.75);
        out.root.check_invariants().unwrap();
    }

    #[tokio::test]
    async fn empty_rubric_is_rejected() {
        let r = rubric(vec![]);
        assert!(matches!(
            build_rkt(&r, &Gateway::mock(), &BuildConfig::default()).await,
            Err(BuildError::Precondition(_))
        ));
    }

    #[tokio::test]
    async fn three_rules_split_in_thirds() {
        let rule = "Define the loss function; derive the gradient update rule; discuss the learning rate choice";
        let gw = Gateway::mock();
        let simplified = gw.ctm(rule).await.unwrap();
        assert_eq!(simplified.len(), 3);
        let parent = super::super::fixtures::node("p", rule, 1.0, 0.3, 0.3, 7);
        let parent = RktNode {
            criteria_simplified_version: simplified,
            separate_rule_number: 3,
            ..parent
        };
        let expanded = expand_node(parent, &gw).await.unwrap();
        assert!(!expanded.leaf);
        assert_eq!(expanded.children.len(), 3);
        for c in &expanded.children {
            assert_eq!(c.influence_relative, 1.0 / 3.0);
            assert!((c.influence_absolute - 0.1).abs() < 1e-15);
            assert_eq!(c.score_source_id, 7);
        }
    }

    #[tokio::test]
    async fn atomic_node_is_left_as_sr() {
        let leaf = super::super::fixtures::node("p", "Define overfitting.", 1.0, 1.0, 1.0, 1);
        let out = expand_node(leaf.clone(), &Gateway::mock()).await.unwrap();
        assert_eq!(out, leaf);
    }

    #[tokio::test]
    async fn depth_cap_forces_sr_with_warning() {
        let out = build_rkt(
            &rubric(vec![(BERT, 1.0)]),
            &Gateway::mock(),
            &BuildConfig { depth_cap: 1 },
        )
        .await
        .unwrap();
        let row = &out.root.children[0];
        assert!(row.leaf && row.forced_sr);
        assert_eq!(row.separate_rule_number, 2);
        assert_eq!(out.warnings.len(), 1);
        out.root.check_invariants().unwrap();
    }

    #[tokio::test]
    async fn levels_flow_to_rows_and_through_csc() {
        let mut r = rubric(vec![(BERT, 1.0)]);
        r.rows[0].levels = vec![
            AchievementLevel {
                quality_description:
                    "Architecture explained with layers. Applications described with fine-tuning."
                        .into(),
                score_level: 1.0,
            },
            AchievementLevel {
                quality_description: "Vague overall.".into(),
                score_level: 0.5,
            },
        ];
        let out = build_rkt(&r, &Gateway::mock(), &BuildConfig::default())
            .await
            .unwrap();
        let row = &out.root.children[0];
        assert_eq!(row.sub_conditions.len(), 2);
        let first = &row.children[0].sub_conditions;
        let second = &row.children[1].sub_conditions;
        assert_eq!(
            first[0],
            SubCondition::new("Architecture explained with layers.", 1.0)
        );
        assert_eq!(
            second[0],
            SubCondition::new("Applications described with fine-tuning.", 1.0)
        );
        // "Vague overall." matches neither child and is broadcast
        assert_eq!(first[1], SubCondition::new("Vague overall.", 0.5));
        assert_eq!(second[1], SubCondition::new("Vague overall.", 0.5));
    }

    #[tokio::test]
    async fn construction_is_deterministic() {
        let r = rubric(vec![
            (BERT, 0.5),
            (
                "Define overfitting and explain how regularization reduces it.",
                0.5,
            ),
        ]);
        let a = build_rkt(&r, &Gateway::mock(), &BuildConfig::default())
            .await
            .unwrap();
        let b = build_rkt(&r, &Gateway::mock(), &BuildConfig::default())
            .await
            .unwrap();
        assert_eq!(
            super::super::serialize_rkt(&a.root),
            super::super::serialize_rkt(&b.root)
        );
    }
}

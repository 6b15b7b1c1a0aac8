//! Aggregation properties on randomly shaped graded trees.

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rkt_core::gateway::{SrVerdict, SubCondition};
use rkt_core::report::propagate_reasons;
use rkt_core::rkt::{deserialize_rkt, serialize_rkt, RktNode};
use rkt_core::scoring::{annotate, LeafEvaluation};

fn blank(id: String, ss: f64, ssid: u32, rel: f64, abs: f64) -> RktNode {
    RktNode {
        id,
        leaf: true,
        criteria: "rule".into(),
        criteria_simplified_version: vec!["rule".into()],
        separate_rule_number: 1,
        score_source: ss,
        score_source_id: ssid,
        influence_relative: rel,
        influence_absolute: abs,
        sub_conditions: vec![],
        children: vec![],
        forced_sr: false,
        node_score: None,
        reasons: None,
        verdict: None,
        max_score: None,
        unscored: None,
    }
}

fn grow(node: &mut RktNode, depth: usize, rng: &mut ChaCha8Rng) {
    node.sub_conditions = (0..rng.gen_range(0..=3))
        .map(|i| SubCondition::new(format!("level {i}"), rng.gen_range(1..=10) as f64 / 10.0))
        .collect();
    if depth >= 4 || rng.gen_bool(0.4) {
        return;
    }
    let fan = rng.gen_range(2..=4);
    node.leaf = false;
    node.separate_rule_number = fan;
    node.criteria_simplified_version = (0..fan).map(|i| format!("part {i}")).collect();
    for i in 0..fan {
        let rel = 1.0 / fan as f64;
        let mut child = blank(
            format!("{}.{i}", node.id),
            node.score_source,
            node.score_source_id,
            rel,
            node.influence_absolute * rel,
        );
        grow(&mut child, depth + 1, rng);
        node.children.push(child);
    }
}

/// A random tree: 1 to 4 rows with random score sources, fan-out up to 4, depth up to 4.
fn random_tree(rng: &mut ChaCha8Rng) -> RktNode {
    let rows = rng.gen_range(1..=4);
    let weights: Vec<f64> = (0..rows).map(|_| rng.gen_range(1..=20) as f64).collect();
    let sum: f64 = weights.iter().sum();
    let mut root = blank("t".into(), 1.0, 0, 1.0, 1.0);
    root.leaf = false;
    root.max_score = Some(10.0);
    root.separate_rule_number = rows;
    root.criteria_simplified_version = (0..rows).map(|i| format!("row {i}")).collect();
    for (i, w) in weights.iter().enumerate() {
        let ss = w / sum;
        let mut row = blank(format!("t.{i}"), ss, i as u32 + 1, ss, ss);
        grow(&mut row, 1, rng);
        root.children.push(row);
    }
    root
}

fn random_verdict(leaf: &RktNode, rng: &mut ChaCha8Rng) -> SrVerdict {
    let met = rng.gen_bool(0.6);
    SrVerdict {
        fulfilled: if met { 1.0 } else { 0.0 },
        matched_level_index: (met && !leaf.sub_conditions.is_empty())
            .then(|| rng.gen_range(0..leaf.sub_conditions.len())),
        lqap: if met {
            rng.gen_range(0..=10) as f64 / 10.0
        } else {
            0.0
        },
        related_content: String::new(),
        reason_text: "checked".into(),
    }
}

fn verdicts(tree: &RktNode, rng: &mut ChaCha8Rng) -> BTreeMap<String, SrVerdict> {
    tree.leaves()
        .into_iter()
        .map(|l| (l.id.clone(), random_verdict(l, rng)))
        .collect()
}

fn evaluations(v: &BTreeMap<String, SrVerdict>) -> BTreeMap<String, LeafEvaluation> {
    v.iter()
        .map(|(k, v)| (k.clone(), LeafEvaluation::Scored(v.clone())))
        .collect()
}

/// Sum over leaves of score source × product of sibling shares below the row × leaf score.
fn flat_oracle(tree: &RktNode, v: &BTreeMap<String, SrVerdict>) -> f64 {
    fn walk(node: &RktNode, weight: f64, v: &BTreeMap<String, SrVerdict>, acc: &mut f64) {
        if node.children.is_empty() {
            let verdict = &v[&node.id];
            let ls = match verdict.matched_level_index {
                Some(i) => node.sub_conditions[i].score,
                None if node.sub_conditions.is_empty() => 1.0,
                None => 0.0,
            };
            let lqap = if node.sub_conditions.is_empty() {
                1.0
            } else {
                verdict.lqap
            };
            *acc += weight * verdict.fulfilled * lqap * ls;
            return;
        }
        let share = 1.0 / node.children.len() as f64;
        for c in &node.children {
            walk(c, weight * share, v, acc);
        }
    }
    let mut acc = 0.0;
    for row in &tree.children {
        walk(row, row.score_source, v, &mut acc);
    }
    acc
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn recursive_total_matches_flat_oracle(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = random_tree(&mut rng);
        tree.check_invariants().unwrap();
        let v = verdicts(&tree, &mut rng);
        let graded = annotate(&tree, &evaluations(&v), false).unwrap();
        let total = graded.node_score.unwrap();
        prop_assert!((total - flat_oracle(&tree, &v)).abs() < 1e-9);
        let rewarded: f64 = propagate_reasons(&graded).unwrap()["t"].iter().map(|e| e.rewarded_score).sum();
        prop_assert!((rewarded - total).abs() < 1e-9);
    }

    #[test]
    fn influence_is_conserved(seed in any::<u64>()) {
        let tree = random_tree(&mut ChaCha8Rng::seed_from_u64(seed));
        for (_, node) in tree.walk() {
            if !node.children.is_empty() {
                let rel: f64 = node.children.iter().map(|c| c.influence_relative).sum();
                prop_assert!((rel - 1.0).abs() < 1e-9);
            }
        }
        for row in &tree.children {
            let abs: f64 = row.leaves().iter().map(|l| l.influence_absolute).sum();
            prop_assert!((abs - row.influence_absolute).abs() < 1e-9);
        }
    }

    #[test]
    fn meeting_one_more_rule_never_lowers_the_total(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = random_tree(&mut rng);
        let mut v = verdicts(&tree, &mut rng);
        let unmet: Vec<String> = v.iter().filter(|(_, x)| x.fulfilled == 0.0).map(|(k, _)| k.clone()).collect();
        prop_assume!(!unmet.is_empty());
        let before = annotate(&tree, &evaluations(&v), false).unwrap().node_score.unwrap();
        let id = &unmet[rng.gen_range(0..unmet.len())];
        let leaf = tree.find(id).unwrap();
        let mut flipped = random_verdict(leaf, &mut rng);
        flipped.fulfilled = 1.0;
        flipped.lqap = rng.gen_range(0..=10) as f64 / 10.0;
        if !leaf.sub_conditions.is_empty() && flipped.matched_level_index.is_none() {
            flipped.matched_level_index = Some(0);
        }
        v.insert(id.clone(), flipped);
        let after = annotate(&tree, &evaluations(&v), false).unwrap().node_score.unwrap();
        prop_assert!(after >= before - 1e-12);
    }

    #[test]
    fn graded_trees_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = random_tree(&mut rng);
        let v = verdicts(&tree, &mut rng);
        let mut graded = annotate(&tree, &evaluations(&v), false).unwrap();
        let reasons = propagate_reasons(&graded).unwrap();
        fn attach(n: &mut RktNode, r: &BTreeMap<String, Vec<rkt_core::report::ReasonEntry>>) {
            n.reasons = r.get(&n.id).cloned();
            n.children.iter_mut().for_each(|c| attach(c, r));
        }
        attach(&mut graded, &reasons);
        let doc = serialize_rkt(&graded);
        prop_assert_eq!(&deserialize_rkt(&doc).unwrap(), &graded);
        prop_assert_eq!(serialize_rkt(&deserialize_rkt(&doc).unwrap()), doc);
    }
}

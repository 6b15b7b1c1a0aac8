//! Rubric data model, file parser and validation.
//!
//! A rubric file is a JSON document:
//!
//! ```json
//! {
//!   "rubric_id": "nlp-final",
//!   "max_score": 20,
//!   "rows": [
//!     { "id": 1, "basic_rule": "BERT Architecture and Applications", "score_source": 30,
//!       "levels": [ { "quality": "Clear and accurate", "score": 100 },
//!                   { "quality": "Some gaps", "score": 50 } ] }
//!   ]
//! }
//! ```
//!
//! Percentages are written as plain numbers in `0..=100` and stored as
//! fractions in `[0, 1]`.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Tolerance used by strict score-source validation.
pub const SCORE_SOURCE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum RubricError {
    #[error("malformed rubric document: {0}")]
    Malformed(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invalid value at {location}: {message}")]
    Field { location: String, message: String },
    #[error("rubric validation failed: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

/// One (quality description, score level) pair of a row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AchievementLevel {
    pub quality_description: String,
    /// Fraction of the row's score source awarded at this level.
    pub score_level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RubricRow {
    pub row_id: u32,
    pub basic_rule: String,
    /// Share of the total score controlled by this row, as a fraction.
    pub score_source: f64,
    pub levels: Vec<AchievementLevel>,
}

impl RubricRow {
    /// Highest attainable score level. Rows without explicit levels behave as
    /// a single implicit level worth 1.0.
    pub fn max_score_level(&self) -> f64 {
        self.levels
            .iter()
            .map(|l| l.score_level)
            .fold(None, |acc: Option<f64>, x| {
                Some(acc.map_or(x, |a| a.max(x)))
            })
            .unwrap_or(1.0)
    }

    /// Levels with the implicit level materialized when none are given.
    pub fn effective_levels(&self) -> Vec<AchievementLevel> {
        if self.levels.is_empty() {
            vec![AchievementLevel {
                quality_description: self.basic_rule.clone(),
                score_level: 1.0,
            }]
        } else {
            self.levels.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rubric {
    pub rubric_id: String,
    pub rows: Vec<RubricRow>,
    pub max_score: f64,
}

impl Rubric {
    pub fn row(&self, row_id: u32) -> Option<&RubricRow> {
        self.rows.iter().find(|r| r.row_id == row_id)
    }

    pub fn score_source_sum(&self) -> f64 {
        self.rows.iter().map(|r| r.score_source).sum()
    }
}

/// How unknown keys in a rubric document are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    #[default]
    Strict,
    Lenient,
}

/// How a score-source sum different from 1.0 is treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationPolicy {
    #[default]
    Strict,
    Normalize,
}

/// A rubric that passed [`validate_rubric`], with any warnings raised on the way.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedRubric {
    rubric: Rubric,
    pub warnings: Vec<String>,
}

impl ValidatedRubric {
    pub fn rubric(&self) -> &Rubric {
        &self.rubric
    }

    pub fn into_inner(self) -> Rubric {
        self.rubric
    }
}

impl std::ops::Deref for ValidatedRubric {
    type Target = Rubric;

    fn deref(&self) -> &Rubric {
        &self.rubric
    }
}

const TOP_KEYS: &[&str] = &["rubric_id", "max_score", "rows"];
const ROW_KEYS: &[&str] = &["id", "basic_rule", "score_source", "levels"];
const LEVEL_KEYS: &[&str] = &["quality", "score"];

/// Parse a rubric JSON document in strict mode.
pub fn parse_rubric(document: &str) -> Result<Rubric, RubricError> {
    parse_rubric_with(document, ParseMode::Strict)
}

pub fn parse_rubric_with(document: &str, mode: ParseMode) -> Result<Rubric, RubricError> {
    let value: Value =
        serde_json::from_str(document).map_err(|e| RubricError::Malformed(e.to_string()))?;
    let top = value
        .as_object()
        .ok_or_else(|| RubricError::Malformed("top level must be an object".into()))?;
    if mode == ParseMode::Strict {
        reject_unknown(top, TOP_KEYS, "rubric")?;
    }

    let rubric_id = match top.get("rubric_id") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(field_err("rubric_id", "expected a string")),
        None => return Err(RubricError::Schema("missing field `rubric_id`".into())),
    };
    let max_score = match top.get("max_score") {
        None | Some(Value::Null) => 1.0,
        Some(v) => v
            .as_f64()
            .ok_or_else(|| field_err("max_score", "expected a number"))?,
    };
    let rows_value = top
        .get("rows")
        .ok_or_else(|| RubricError::Schema("missing field `rows`".into()))?
        .as_array()
        .ok_or_else(|| field_err("rows", "expected an array"))?;

    let mut rows = Vec::with_capacity(rows_value.len());
    for (index, row) in rows_value.iter().enumerate() {
        rows.push(parse_row(index, row, mode)?);
    }

    Ok(Rubric {
        rubric_id,
        rows,
        max_score,
    })
}

fn parse_row(index: usize, row: &Value, mode: ParseMode) -> Result<RubricRow, RubricError> {
    let at = |field: &str| format!("rows[{index}].{field}");
    let obj = row
        .as_object()
        .ok_or_else(|| field_err(&format!("rows[{index}]"), "expected an object"))?;
    if mode == ParseMode::Strict {
        reject_unknown(obj, ROW_KEYS, &format!("rows[{index}]"))?;
    }
    for essential in ["id", "basic_rule", "score_source"] {
        if !obj.contains_key(essential) {
            return Err(RubricError::Schema(format!(
                "rows[{index}]: missing essential column `{essential}`"
            )));
        }
    }

    let row_id = obj["id"]
        .as_u64()
        .filter(|id| *id <= u32::MAX as u64)
        .ok_or_else(|| field_err(&at("id"), "expected a non-negative integer"))?
        as u32;
    let basic_rule = obj["basic_rule"]
        .as_str()
        .ok_or_else(|| field_err(&at("basic_rule"), "expected a string"))?
        .to_string();
    let score_source = percent(&obj["score_source"])
        .ok_or_else(|| field_err(&at("score_source"), "expected a percentage number"))?;

    let levels = match obj.get("levels") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => {
            let mut levels = Vec::with_capacity(items.len());
            for (j, item) in items.iter().enumerate() {
                let loc = format!("rows[{index}].levels[{j}]");
                let lobj = item
                    .as_object()
                    .ok_or_else(|| field_err(&loc, "expected an object"))?;
                if mode == ParseMode::Strict {
                    reject_unknown(lobj, LEVEL_KEYS, &loc)?;
                }
                let quality = lobj
                    .get("quality")
                    .and_then(Value::as_str)
                    .ok_or_else(|| field_err(&format!("{loc}.quality"), "expected a string"))?;
                let score = lobj.get("score").and_then(percent).ok_or_else(|| {
                    field_err(&format!("{loc}.score"), "expected a percentage number")
                })?;
                levels.push(AchievementLevel {
                    quality_description: quality.to_string(),
                    score_level: score,
                });
            }
            levels
        }
        Some(_) => return Err(field_err(&at("levels"), "expected an array")),
    };

    Ok(RubricRow {
        row_id,
        basic_rule,
        score_source,
        levels,
    })
}

fn percent(value: &Value) -> Option<f64> {
    value.as_f64().filter(|v| v.is_finite()).map(|p| p / 100.0)
}

fn field_err(location: &str, message: &str) -> RubricError {
    RubricError::Field {
        location: location.to_string(),
        message: message.to_string(),
    }
}

fn reject_unknown(obj: &Map<String, Value>, allowed: &[&str], at: &str) -> Result<(), RubricError> {
    match obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(key) => Err(RubricError::Schema(format!("{at}: unknown field `{key}`"))),
        None => Ok(()),
    }
}

/// Convert a stored fraction back into the percentage written in files,
/// choosing the float that parses back to exactly the same fraction.
fn fraction_to_percent(fraction: f64) -> f64 {
    let guess = fraction * 100.0;
    if guess / 100.0 == fraction {
        return guess;
    }
    let (mut up, mut down) = (guess, guess);
    for _ in 0..8 {
        up = up.next_up();
        down = down.next_down();
        if up / 100.0 == fraction {
            return up;
        }
        if down / 100.0 == fraction {
            return down;
        }
    }
    guess
}

/// Serialize a rubric back into the canonical document form.
pub fn serialize_rubric(rubric: &Rubric) -> String {
    let rows: Vec<Value> = rubric
        .rows
        .iter()
        .map(|row| {
            let mut obj = Map::new();
            obj.insert("id".into(), row.row_id.into());
            obj.insert("basic_rule".into(), row.basic_rule.clone().into());
            obj.insert(
                "score_source".into(),
                fraction_to_percent(row.score_source).into(),
            );
            if !row.levels.is_empty() {
                let levels: Vec<Value> = row
                    .levels
                    .iter()
                    .map(|l| {
                        serde_json::json!({
                            "quality": l.quality_description,
                            "score": fraction_to_percent(l.score_level),
                        })
                    })
                    .collect();
                obj.insert("levels".into(), levels.into());
            }
            Value::Object(obj)
        })
        .collect();
    let doc = serde_json::json!({
        "rubric_id": rubric.rubric_id,
        "max_score": rubric.max_score,
        "rows": rows,
    });
    serde_json::to_string_pretty(&doc).expect("rubric document is always serializable")
}

struct Sum(f64);

impl fmt::Display for Sum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = format!("{:.6}", self.0);
        let s = s.trim_end_matches('0').trim_end_matches('.');
        f.write_str(s)
    }
}

/// Enforce rubric invariants. Every problem found is reported, not just the first.
pub fn validate_rubric(
    rubric: Rubric,
    policy: ValidationPolicy,
) -> Result<ValidatedRubric, RubricError> {
    let mut issues = Vec::new();
    let mut warnings = Vec::new();

    if rubric.rubric_id.trim().is_empty() {
        issues.push("rubric_id is empty".to_string());
    }
    if !(rubric.max_score.is_finite() && rubric.max_score > 0.0) {
        issues.push(format!(
            "max_score must be positive, got {}",
            rubric.max_score
        ));
    }
    if rubric.rows.is_empty() {
        issues.push("rubric has no rows".to_string());
    }

    let mut seen = BTreeSet::new();
    for row in &rubric.rows {
        let id = row.row_id;
        if id == 0 {
            issues.push("row id 0 is not a positive integer".to_string());
        }
        if !seen.insert(id) {
            issues.push(format!("duplicate row id {id}"));
        }
        if row.basic_rule.trim().is_empty() {
            issues.push(format!("row {id}: basic_rule is empty"));
        }
        if !(row.score_source > 0.0 && row.score_source <= 1.0) {
            issues.push(format!(
                "row {id}: score_source {} is outside (0, 100]",
                Sum(row.score_source * 100.0)
            ));
        }
        for (j, level) in row.levels.iter().enumerate() {
            if !(0.0..=1.0).contains(&level.score_level) {
                issues.push(format!(
                    "row {id}: level {j} score {} is outside [0, 100]",
                    Sum(level.score_level * 100.0)
                ));
            }
            if level.quality_description.trim().is_empty() {
                issues.push(format!("row {id}: level {j} quality description is empty"));
            }
        }
    }

    let mut rubric = rubric;
    let sum = rubric.score_source_sum();
    if !rubric.rows.is_empty() && (sum - 1.0).abs() > SCORE_SOURCE_TOLERANCE {
        match policy {
            ValidationPolicy::Strict => {
                issues.push(format!("score sources sum to {}", Sum(sum)));
            }
            ValidationPolicy::Normalize if sum > 0.0 && issues.is_empty() => {
                for row in &mut rubric.rows {
                    row.score_source /= sum;
                }
                warnings.push(format!(
                    "score sources summed to {}; rescaled to 1",
                    Sum(sum)
                ));
            }
            ValidationPolicy::Normalize => {}
        }
    }

    if issues.is_empty() {
        Ok(ValidatedRubric { rubric, warnings })
    } else {
        Err(RubricError::Invalid(issues))
    }
}

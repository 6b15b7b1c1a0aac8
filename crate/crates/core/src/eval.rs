//! Agreement metrics between predicted and gold scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::word_count;

/// Default word-count threshold for the length split.
pub const DEFAULT_LENGTH_THRESHOLD: usize = 600;

pub const UNDEFINED: &str = "undefined";

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {predicted} predictions but {gold} gold scores")]
    LengthMismatch { predicted: usize, gold: usize },
    #[error("no scores to evaluate")]
    Empty,
    #[error("{which} value {value} at index {index} is outside [0, 1]")]
    OutOfRange {
        which: &'static str,
        index: usize,
        value: f64,
    },
    #[error("score grid is incomplete: {0}")]
    IncompleteGrid(String),
    #[error("reliability is undefined for this grid")]
    Undefined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when the gold scores have no variance.
    pub r2: Option<f64>,
    /// `None` when either side has no variance.
    pub pearson_r: Option<f64>,
    pub n: usize,
}

fn check_range(which: &'static str, values: &[f64]) -> Result<(), EvalError> {
    match values.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(index) => Err(EvalError::OutOfRange {
            which,
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn compute_metrics(predicted: &[f64], gold: &[f64]) -> Result<EvalMetrics, EvalError> {
    if predicted.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            predicted: predicted.len(),
            gold: gold.len(),
        });
    }
    if predicted.is_empty() {
        return Err(EvalError::Empty);
    }
    check_range("predicted", predicted)?;
    check_range("gold", gold)?;

    let n = predicted.len();
    let errors: Vec<f64> = predicted.iter().zip(gold).map(|(p, g)| p - g).collect();
    let mae = errors.iter().map(|e| e.abs()).sum::<f64>() / n as f64;
    let sse: f64 = errors.iter().map(|e| e * e).sum();
    let rmse = (sse / n as f64).sqrt();

    let mp = mean(predicted);
    let mg = mean(gold);
    let ss_gold: f64 = gold.iter().map(|g| (g - mg).powi(2)).sum();
    let ss_pred: f64 = predicted.iter().map(|p| (p - mp).powi(2)).sum();
    let cov: f64 = predicted
        .iter()
        .zip(gold)
        .map(|(p, g)| (p - mp) * (g - mg))
        .sum();

    let varies = |xs: &[f64]| xs.iter().any(|x| *x != xs[0]);
    let r2 = varies(gold).then(|| 1.0 - sse / ss_gold);
    let pearson_r = (varies(gold) && varies(predicted))
        .then(|| (cov / (ss_gold * ss_pred).sqrt()).clamp(-1.0, 1.0));
    Ok(EvalMetrics {
        mae,
        rmse,
        r2,
        pearson_r,
        n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityResult {
    pub icc: f64,
    pub runs: usize,
    pub subjects: usize,
    /// Set when every cell is identical and the value is 1 by convention.
    pub degenerate: bool,
}

/// ICC(2,1): two-way random effects, absolute agreement, single measurement.
///
/// `grid[i][j]` is the score of subject `i` in run `j`.
pub fn compute_icc(grid: &[Vec<f64>]) -> Result<ReliabilityResult, EvalError> {
    let n = grid.len();
    if n < 2 {
        return Err(EvalError::IncompleteGrid(format!(
            "{n} subjects, need at least 2"
        )));
    }
    let k = grid[0].len();
    if k < 2 {
        return Err(EvalError::IncompleteGrid(format!(
            "{k} runs, need at least 2"
        )));
    }
    if let Some(i) = grid.iter().position(|row| row.len() != k) {
        return Err(EvalError::IncompleteGrid(format!(
            "subject {i} has {} runs, expected {k}",
            grid[i].len()
        )));
    }
    if grid.iter().flatten().any(|v| !v.is_finite()) {
        return Err(EvalError::IncompleteGrid("non-finite score".into()));
    }

    let first = grid[0][0];
    if grid.iter().flatten().all(|v| *v == first) {
        return Ok(ReliabilityResult {
            icc: 1.0,
            runs: k,
            subjects: n,
            degenerate: true,
        });
    }

    let (nf, kf) = (n as f64, k as f64);
    let grand = grid.iter().flatten().sum::<f64>() / (nf * kf);
    let row_means: Vec<f64> = grid.iter().map(|r| mean(r)).collect();
    let col_means: Vec<f64> = (0..k)
        .map(|j| grid.iter().map(|r| r[j]).sum::<f64>() / nf)
        .collect();

    let ss_rows = kf * row_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_cols = nf * col_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_total: f64 = grid.iter().flatten().map(|v| (v - grand).powi(2)).sum();
    let ss_err = (ss_total - ss_rows - ss_cols).max(0.0);

    let msr = ss_rows / (nf - 1.0);
    let msc = ss_cols / (kf - 1.0);
    let mse = ss_err / ((nf - 1.0) * (kf - 1.0));
    let denom = msr + (kf - 1.0) * mse + kf * (msc - mse) / nf;
    if denom.abs() < f64::EPSILON {
        return Err(EvalError::Undefined);
    }
    Ok(ReliabilityResult {
        icc: (msr - mse) / denom,
        runs: k,
        subjects: n,
        degenerate: false,
    })
}

/// One graded answer with its gold score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub answer_id: String,
    #[serde(default)]
    pub answer_text: String,
    pub predicted: f64,
    pub gold: f64,
    #[serde(default)]
    pub run_id: Option<String>,
    /// Used instead of counting `answer_text` when the text is not at hand.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub words: Option<usize>,
}

impl EvalRecord {
    pub fn word_count(&self) -> usize {
        self.words.unwrap_or_else(|| word_count(&self.answer_text))
    }
}

/// Split into answers of at most `threshold` words and longer ones.
pub fn split_by_length(
    records: &[EvalRecord],
    threshold: usize,
) -> (Vec<EvalRecord>, Vec<EvalRecord>) {
    records
        .iter()
        .cloned()
        .partition(|r| r.word_count() <= threshold)
}

/// Collapse multiple runs to one record per answer holding the mean prediction.
///
/// Order follows first appearance. The first record's gold and text are kept.
pub fn mean_over_runs(records: &[EvalRecord]) -> Vec<EvalRecord> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<&str, (EvalRecord, f64, usize)> = BTreeMap::new();
    for r in records {
        groups
            .entry(r.answer_id.as_str())
            .and_modify(|(_, sum, count)| {
                *sum += r.predicted;
                *count += 1;
            })
            .or_insert_with(|| {
                order.push(r.answer_id.clone());
                (r.clone(), r.predicted, 1)
            });
    }
    order
        .iter()
        .map(|id| {
            let (first, sum, count) = &groups[id.as_str()];
            EvalRecord {
                predicted: sum / *count as f64,
                run_id: None,
                ..first.clone()
            }
        })
        .collect()
}

/// Subjects × runs grid from records tagged with run ids.
///
/// Returns `Ok(None)` when fewer than two distinct runs are present.
pub fn run_grid(records: &[EvalRecord]) -> Result<Option<Vec<Vec<f64>>>, EvalError> {
    let mut runs: Vec<&str> = records
        .iter()
        .map(|r| r.run_id.as_deref().unwrap_or(""))
        .collect();
    runs.sort();
    runs.dedup();
    if runs.len() < 2 {
        return Ok(None);
    }
    let mut cells: BTreeMap<(&str, &str), f64> = BTreeMap::new();
    let mut subjects: Vec<&str> = Vec::new();
    for r in records {
        let run = r.run_id.as_deref().unwrap_or("");
        if cells
            .insert((r.answer_id.as_str(), run), r.predicted)
            .is_some()
        {
            return Err(EvalError::IncompleteGrid(format!(
                "answer {} appears twice in run {run:?}",
                r.answer_id
            )));
        }
        if !subjects.contains(&r.answer_id.as_str()) {
            subjects.push(&r.answer_id);
        }
    }
    subjects
        .iter()
        .map(|s| {
            runs.iter()
                .map(|run| {
                    cells.get(&(*s, *run)).copied().ok_or_else(|| {
                        EvalError::IncompleteGrid(format!("answer {s} is missing from run {run:?}"))
                    })
                })
                .collect()
        })
        .collect::<Result<Vec<Vec<f64>>, _>>()
        .map(Some)
}

/// One line of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub dataset: String,
    /// `None` when the slice is empty.
    pub metrics: Option<EvalMetrics>,
}

/// Metrics on the whole set and on both sides of the length threshold.
pub fn sliced_metrics(
    method: &str,
    records: &[EvalRecord],
    threshold: usize,
) -> Result<Vec<MetricsRow>, EvalError> {
    let (under, over) = split_by_length(records, threshold);
    let slices = [
        ("whole".to_string(), records.to_vec()),
        (format!("<= {threshold} words"), under),
        (format!("> {threshold} words"), over),
    ];
    slices
        .into_iter()
        .map(|(dataset, rs)| {
            let metrics = if rs.is_empty() {
                None
            } else {
                let p: Vec<f64> = rs.iter().map(|r| r.predicted).collect();
                let g: Vec<f64> = rs.iter().map(|r| r.gold).collect();
                Some(compute_metrics(&p, &g)?)
            };
            Ok(MetricsRow {
                method: method.to_string(),
                dataset,
                metrics,
            })
        })
        .collect()
}

pub const TABLE_COLUMNS: [&str; 6] = ["Method", "Dataset", "MAE", "RMSE", "R²", "Pearson's r"];

fn fmt4(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}"))
        .unwrap_or_else(|| UNDEFINED.to_string())
}

/// Aligned plain-text table, one line per row.
pub fn render_table(rows: &[MetricsRow]) -> String {
    let body: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            let m = r.metrics.as_ref();
            [
                r.method.clone(),
                r.dataset.clone(),
                fmt4(m.map(|m| m.mae)),
                fmt4(m.map(|m| m.rmse)),
                fmt4(m.and_then(|m| m.r2)),
                fmt4(m.and_then(|m| m.pearson_r)),
            ]
        })
        .collect();
    let mut widths = TABLE_COLUMNS.map(|c| c.chars().count());
    for line in &body {
        for (w, cell) in widths.iter_mut().zip(line) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let fmt_line = |cells: &[String]| {
        cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect::<Vec<_>>()
            .join(" | ")
            .trim_end()
            .to_string()
    };
    let header: Vec<String> = TABLE_COLUMNS.iter().map(|c| c.to_string()).collect();
    let mut out = vec![fmt_line(&header)];
    out.push(
        widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .join("-+-"),
    );
    out.extend(body.iter().map(|l| fmt_line(l)));
    out.join("\n") + "\n"
}

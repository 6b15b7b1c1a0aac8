use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use rkt_core::eval::{self, EvalRecord, MetricsRow, ReliabilityResult};
use rkt_core::gateway::prompts::PromptSet;
use rkt_core::gateway::{Gateway, GatewayConfig, MockBackend, RemoteBackend, RemoteConfig};
use rkt_core::report::{propagate_reasons, render_report_with, Report};
use rkt_core::rkt::{
    build_rkt, deserialize_rkt, serialize_rkt, write_atomic, BuildConfig, RktNode, TreeCache,
};
use rkt_core::rubric::{parse_rubric, validate_rubric, Rubric, ValidationPolicy};
use rkt_core::scoring::{score_answer, GradingResult, ScoreConfig};
use serde::{Deserialize, Serialize};

use crate::config::{BackendKind, RunConfig};
use crate::error::{CliError, CliResult};

pub const RESULT_SUFFIX: &str = ".result.json";
pub const FAILURES_FILE: &str = "failures.json";

fn read_text(path: &Path, what: &str) -> CliResult<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Input(format!("cannot read {what} {}: {e}", path.display())))?;
    String::from_utf8(bytes)
        .map_err(|_| CliError::Input(format!("{what} {} is not valid UTF-8", path.display())))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Input(format!("cannot create {}: {e}", dir.display())))?;
    }
    write_atomic(path, text.as_bytes())
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

fn prompts(config: &RunConfig) -> CliResult<PromptSet> {
    if config.template_set == "default" {
        Ok(PromptSet::default())
    } else {
        PromptSet::from_dir(Path::new(&config.template_set)).map_err(CliError::Input)
    }
}

/// Gateway for the configured backend. The mock never touches the network
/// or the remote environment variables.
pub fn gateway(config: &RunConfig) -> CliResult<(Gateway, String)> {
    let prompts = prompts(config)?;
    let version = prompts.version().to_string();
    let gw_config = GatewayConfig {
        continuous_sp: config.continuous_sp,
        max_in_flight: config.concurrency_limit,
        ..GatewayConfig::default()
    };
    let gateway = match config.backend {
        BackendKind::Mock => Gateway::new(Arc::new(MockBackend::new()), gw_config),
        BackendKind::Remote => {
            let remote = RemoteConfig::from_env().map_err(CliError::Backend)?;
            let backend = RemoteBackend::new(remote, prompts).map_err(CliError::Backend)?;
            Gateway::new(Arc::new(backend), gw_config)
        }
    };
    Ok((gateway, version))
}

pub fn load_rubric(path: &Path, policy: ValidationPolicy) -> CliResult<Rubric> {
    let text = read_text(path, "rubric")?;
    let rubric =
        parse_rubric(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let validated = validate_rubric(rubric, policy).map_err(|e| {
        CliError::Input(format!(
            "{}: validate_rubric rejected the rubric: {e}",
            path.display()
        ))
    })?;
    for w in &validated.warnings {
        tracing::warn!("{}: {w}", path.display());
    }
    Ok(validated.into_inner())
}

#[derive(Debug)]
pub struct BuiltTree {
    pub path: PathBuf,
    pub root: RktNode,
    pub warnings: Vec<String>,
    pub from_cache: bool,
}

/// Build (or fetch from the cache) the tree for a rubric file and store it
/// under its content hash.
pub async fn cmd_build_tree(
    rubric_path: &Path,
    config: &RunConfig,
    policy: ValidationPolicy,
) -> CliResult<BuiltTree> {
    let rubric = load_rubric(rubric_path, policy)?;
    let (gateway, template_version) = gateway(config)?;
    let build = BuildConfig {
        depth_cap: config.depth_cap,
    };
    let cache = TreeCache::new(&config.cache_dir);
    let key = TreeCache::key(&rubric, &build, &template_version, gateway.backend_id());
    if let Some(root) = cache.load(&key) {
        return Ok(BuiltTree {
            path: cache.path_for(&key),
            root,
            warnings: vec![],
            from_cache: true,
        });
    }
    let out = build_rkt(&rubric, &gateway, &build).await?;
    out.root
        .check_invariants()
        .map_err(|e| CliError::Internal(format!("built tree is inconsistent: {e}")))?;
    let path = cache.store(&key, &out.root).map_err(|e| {
        CliError::Input(format!(
            "cannot write cache {}: {e}",
            config.cache_dir.display()
        ))
    })?;
    Ok(BuiltTree {
        path,
        root: out.root,
        warnings: out.warnings,
        from_cache: false,
    })
}

pub fn load_tree(path: &Path) -> CliResult<RktNode> {
    let text = read_text(path, "tree")?;
    deserialize_rkt(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Where the tree to grade against comes from.
#[derive(Debug, Clone)]
pub enum TreeSource {
    Tree(PathBuf),
    Rubric(PathBuf, ValidationPolicy),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradedAnswer {
    pub answer_id: String,
    pub path: PathBuf,
    pub total_score: f64,
    pub scaled_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerFailure {
    pub answer_id: String,
    pub source: PathBuf,
    pub error: String,
    pub exit_code: i32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradeSummary {
    pub graded: Vec<GradedAnswer>,
    pub failures: Vec<AnswerFailure>,
}

impl GradeSummary {
    /// Lines of `answer_id<TAB>total<TAB>scaled`, then failures.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for g in &self.graded {
            out.push_str(&format!(
                "{}\t{:.4}\t{:.4}\n",
                g.answer_id, g.total_score, g.scaled_score
            ));
        }
        for f in &self.failures {
            out.push_str(&format!("{}\tFAILED\t{}\n", f.answer_id, f.error));
        }
        out.push_str(&format!(
            "graded {} of {}\n",
            self.graded.len(),
            self.graded.len() + self.failures.len()
        ));
        out
    }

    /// Outcome for the batch: fail when nothing was graded, or when anything
    /// failed and partial results were not allowed.
    pub fn outcome(&self, partial_ok: bool) -> CliResult<()> {
        let Some(first) = self.failures.first() else {
            return Ok(());
        };
        if self.graded.is_empty() || !partial_ok {
            let msg = format!(
                "{} of {} answers failed",
                self.failures.len(),
                self.graded.len() + self.failures.len()
            );
            return Err(match first.exit_code {
                2 => CliError::Backend(msg),
                3 => CliError::Internal(msg),
                _ => CliError::Input(msg),
            });
        }
        tracing::warn!("{} answers failed and were skipped", self.failures.len());
        Ok(())
    }
}

/// Answer files under `path`: the file itself, or the non-hidden files of a
/// directory in name order. Answer ids are file stems and must be unique.
pub fn answer_files(path: &Path) -> CliResult<Vec<(String, PathBuf)>> {
    let meta = std::fs::metadata(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    let files = if meta.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| CliError::Input(format!("cannot list {}: {e}", path.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .filter(|p| {
                !p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with('.'))
            })
            .collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    let mut seen = BTreeSet::new();
    files
        .into_iter()
        .map(|p| {
            let id = p
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| {
                    CliError::Input(format!("cannot derive an answer id from {}", p.display()))
                })?
                .to_string();
            if !seen.insert(id.clone()) {
                return Err(CliError::Input(format!(
                    "answer id {id} is used by more than one file"
                )));
            }
            Ok((id, p))
        })
        .collect()
}

pub struct GradeRequest<'a> {
    pub source: TreeSource,
    pub answers: &'a Path,
    pub out_dir: &'a Path,
    pub run_id: Option<String>,
}

async fn grade_one(
    tree: &RktNode,
    gateway: &Gateway,
    config: &RunConfig,
    id: &str,
    path: &Path,
    out_dir: &Path,
    run_id: Option<&String>,
) -> Result<GradedAnswer, CliError> {
    let answer = read_text(path, "answer")?;
    let score_config = ScoreConfig {
        partial_ok: config.partial_ok,
        concurrency: config.concurrency_limit,
    };
    let mut result = score_answer(tree, &answer, gateway, &score_config).await?;
    result.answer_id = id.to_string();
    result.run_meta.run_id = run_id.cloned();
    if config.backend == BackendKind::Remote {
        result.run_meta.timestamp = Some(chrono::Utc::now().to_rfc3339());
    }
    let out = out_dir.join(format!("{id}{RESULT_SUFFIX}"));
    write_file(&out, &result.to_json())?;
    Ok(GradedAnswer {
        answer_id: id.to_string(),
        path: out,
        total_score: result.total_score,
        scaled_score: result.scaled_score,
    })
}

/// Grade one answer file or every file of a directory, one result document each.
pub async fn cmd_grade(request: GradeRequest<'_>, config: &RunConfig) -> CliResult<GradeSummary> {
    let tree = match &request.source {
        TreeSource::Tree(p) => load_tree(p)?,
        TreeSource::Rubric(p, policy) => cmd_build_tree(p, config, *policy).await?.root,
    };
    let files = answer_files(request.answers)?;
    let (gateway, _) = gateway(config)?;
    std::fs::create_dir_all(request.out_dir).map_err(|e| {
        CliError::Input(format!("cannot create {}: {e}", request.out_dir.display()))
    })?;

    let outcomes: Vec<_> = stream::iter(files.iter().map(|(id, path)| {
        grade_one(
            &tree,
            &gateway,
            config,
            id,
            path,
            request.out_dir,
            request.run_id.as_ref(),
        )
    }))
    .buffered(config.concurrency_limit)
    .collect()
    .await;

    let mut summary = GradeSummary::default();
    for ((id, path), outcome) in files.iter().zip(outcomes) {
        match outcome {
            Ok(g) => summary.graded.push(g),
            Err(e) => {
                tracing::warn!(answer = %id, "{e}");
                summary.failures.push(AnswerFailure {
                    answer_id: id.clone(),
                    source: path.clone(),
                    error: e.to_string(),
                    exit_code: e.exit_code(),
                });
            }
        }
    }
    let failures_path = request.out_dir.join(FAILURES_FILE);
    if summary.failures.is_empty() {
        if failures_path.exists() {
            std::fs::remove_file(&failures_path).ok();
        }
    } else {
        let text = serde_json::to_string_pretty(&summary.failures).expect("failures serialize");
        write_file(&failures_path, &text)?;
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
struct GoldRecord {
    answer_id: String,
    gold: f64,
}

pub fn load_gold(path: &Path) -> CliResult<BTreeMap<String, f64>> {
    let text = read_text(path, "gold file")?;
    let records: Vec<GoldRecord> = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
    } else {
        csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes())
            .deserialize()
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
    };
    let mut gold = BTreeMap::new();
    for r in records {
        if gold.insert(r.answer_id.clone(), r.gold).is_some() {
            return Err(CliError::Input(format!(
                "{}: answer {} listed twice",
                path.display(),
                r.answer_id
            )));
        }
    }
    Ok(gold)
}

fn result_files(path: &Path) -> CliResult<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| CliError::Input(format!("cannot list {}: {e}", path.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.ends_with(RESULT_SUFFIX))
            })
            .collect();
        files.sort();
        Ok(files)
    } else if path.is_file() {
        Ok(vec![path.to_path_buf()])
    } else {
        Err(CliError::Input(format!("no results at {}", path.display())))
    }
}

pub fn load_result(path: &Path) -> CliResult<GradingResult> {
    let text = read_text(path, "result")?;
    GradingResult::from_json(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub rows: Vec<MetricsRow>,
    pub icc: Option<ReliabilityResult>,
    pub runs: usize,
    pub threshold: usize,
}

impl EvalOutput {
    pub fn render(&self) -> String {
        let mut out = eval::render_table(&self.rows);
        match &self.icc {
            Some(r) => out.push_str(&format!(
                "\nICC(2,1): {:.4} ({} runs, {} answers{})\n",
                r.icc,
                r.runs,
                r.subjects,
                if r.degenerate {
                    ", all scores identical"
                } else {
                    ""
                }
            )),
            None => out.push_str("\nICC(2,1): n/a (needs ≥2 runs)\n"),
        }
        out
    }
}

/// Metrics of graded results against gold scores, whole and split by length.
///
/// Each input path is one run unless its results carry their own run ids.
/// With several runs, predictions are averaged per answer for the metrics.
pub fn cmd_evaluate(
    results: &[PathBuf],
    gold_path: &Path,
    threshold: usize,
    method: &str,
) -> CliResult<EvalOutput> {
    if results.is_empty() {
        return Err(CliError::Input("no result paths given".into()));
    }
    let gold = load_gold(gold_path)?;
    let mut records = Vec::new();
    let mut unmatched = BTreeSet::new();
    for path in results {
        let files = result_files(path)?;
        if files.is_empty() {
            return Err(CliError::Input(format!(
                "no {RESULT_SUFFIX} files in {}",
                path.display()
            )));
        }
        for file in files {
            let r = load_result(&file)?;
            let Some(g) = gold.get(&r.answer_id) else {
                unmatched.insert(r.answer_id);
                continue;
            };
            records.push(EvalRecord {
                answer_id: r.answer_id.clone(),
                answer_text: String::new(),
                predicted: r.total_score,
                gold: *g,
                run_id: Some(
                    r.run_meta
                        .run_id
                        .clone()
                        .unwrap_or_else(|| path.display().to_string()),
                ),
                words: Some(r.answer_words),
            });
        }
    }
    if !unmatched.is_empty() {
        return Err(CliError::Input(format!(
            "no gold score for: {}",
            unmatched.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    let runs = records
        .iter()
        .filter_map(|r| r.run_id.as_deref())
        .collect::<BTreeSet<_>>()
        .len();
    let icc = match eval::run_grid(&records)? {
        Some(grid) => Some(eval::compute_icc(&grid)?),
        None => None,
    };
    let rows = eval::sliced_metrics(method, &eval::mean_over_runs(&records), threshold)?;
    Ok(EvalOutput {
        rows,
        icc,
        runs,
        threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportFormat {
    Text,
    Json,
}

/// Regenerate the report of a stored result from its graded tree.
pub fn cmd_report(result_path: &Path, template: Option<&Path>) -> CliResult<Report> {
    let result = load_result(result_path)?;
    let reasons = propagate_reasons(&result.tree)
        .map_err(|e| CliError::Input(format!("{}: {e}", result_path.display())))?;
    let source = match template {
        Some(p) => read_text(p, "report template")?,
        None => rkt_core::report::DEFAULT_TEMPLATE.to_string(),
    };
    render_report_with(&result.tree, &reasons, &source).map_err(|e| CliError::Input(e.to_string()))
}

/// Pretty tree document, as stored in the cache.
pub fn tree_document(root: &RktNode) -> String {
    serialize_rkt(root)
}

pub fn write_output(path: &Path, text: &str) -> CliResult<()> {
    write_file(path, text)
}

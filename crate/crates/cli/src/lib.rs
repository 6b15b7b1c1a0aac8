//! `rktgrade`: build rubric knowledge trees, grade answers and evaluate results.
//!
//! Exit codes: 0 success, 1 input or validation error, 2 backend or transport
//! error, 3 internal invariant violation.

pub mod commands;
pub mod config;
pub mod error;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rkt_core::eval::DEFAULT_LENGTH_THRESHOLD;
use rkt_core::rubric::ValidationPolicy;

use commands::{GradeRequest, ReportFormat, TreeSource};
use config::{BackendKind, ConfigLayer, RunConfig};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "rktgrade",
    version,
    about = "Rubric-driven grading of free-text answers"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct GlobalArgs {
    /// Model backend.
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendKind>,
    /// Deepest level a rule may be split to (root = 0).
    #[arg(long, global = true)]
    pub depth_cap: Option<usize>,
    /// Let leaves report partial fulfillment instead of met / not met.
    #[arg(long, global = true)]
    pub continuous_sp: bool,
    /// Score failed leaves as 0 and keep going in batches.
    #[arg(long, global = true)]
    pub partial_ok: bool,
    /// Answers and model calls in flight at once.
    #[arg(long, global = true)]
    pub concurrency: Option<usize>,
    /// Where built trees are cached.
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    /// `default`, or a directory holding the five prompt templates.
    #[arg(long, global = true)]
    pub template_set: Option<String>,
    /// TOML or JSON file with run settings.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log progress at debug level.
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

impl GlobalArgs {
    fn layer(&self) -> ConfigLayer {
        ConfigLayer {
            backend: self.backend,
            depth_cap: self.depth_cap,
            continuous_sp: self.continuous_sp.then_some(true),
            partial_ok: self.partial_ok.then_some(true),
            concurrency_limit: self.concurrency,
            cache_dir: self.cache_dir.clone(),
            template_set: self.template_set.clone(),
        }
    }

    pub fn resolve(&self) -> CliResult<RunConfig> {
        config::layered(
            self.layer(),
            self.config.as_deref(),
            ConfigLayer::from_env()?,
        )
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the tree for a rubric and print where it was stored.
    BuildTree {
        rubric: PathBuf,
        /// Also copy the tree document here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Rescale score sources that do not sum to 1 instead of rejecting them.
        #[arg(long)]
        normalize: bool,
    },
    /// Grade one answer file, or every file in a directory.
    Grade {
        /// Answer file or directory of answers.
        answers: PathBuf,
        /// A tree written by `build-tree`.
        #[arg(long, conflicts_with = "rubric", required_unless_present = "rubric")]
        tree: Option<PathBuf>,
        /// Build (or reuse) the tree for this rubric.
        #[arg(long)]
        rubric: Option<PathBuf>,
        /// Rescale score sources that do not sum to 1.
        #[arg(long)]
        normalize: bool,
        /// Directory for result documents.
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Label stored with each result, used to pair repeated runs.
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Compare results with gold scores.
    Evaluate {
        /// Result files or directories; each is one run unless results carry run ids.
        #[arg(required = true)]
        results: Vec<PathBuf>,
        /// CSV or JSON with `answer_id` and `gold` (fraction of the maximum).
        #[arg(long)]
        gold: PathBuf,
        /// Word count separating short from long answers.
        #[arg(long, default_value_t = DEFAULT_LENGTH_THRESHOLD)]
        threshold: usize,
        /// Label for the method column.
        #[arg(long, default_value = "rkt")]
        method: String,
        /// Also write the metrics as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the report of a stored result.
    Report {
        result: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: ReportFormat,
        /// Report template to use instead of the built-in one.
        #[arg(long)]
        template: Option<PathBuf>,
    },
}

fn policy(normalize: bool) -> ValidationPolicy {
    if normalize {
        ValidationPolicy::Normalize
    } else {
        ValidationPolicy::Strict
    }
}

/// Run a parsed command line, writing normal output to `out`.
pub async fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    let io = |e: std::io::Error| CliError::Internal(format!("cannot write output: {e}"));
    match cli.command {
        Command::BuildTree {
            rubric,
            out: copy,
            normalize,
        } => {
            let config = cli.global.resolve()?;
            let built = commands::cmd_build_tree(&rubric, &config, policy(normalize)).await?;
            for w in &built.warnings {
                tracing::warn!("{w}");
            }
            if let Some(copy) = copy {
                commands::write_output(&copy, &commands::tree_document(&built.root))?;
            }
            writeln!(out, "{}", built.path.display()).map_err(io)?;
        }
        Command::Grade {
            answers,
            tree,
            rubric,
            normalize,
            out: out_dir,
            run_id,
        } => {
            let config = cli.global.resolve()?;
            let source = match (tree, rubric) {
                (Some(t), _) => TreeSource::Tree(t),
                (None, Some(r)) => TreeSource::Rubric(r, policy(normalize)),
                (None, None) => return Err(CliError::Input("give --tree or --rubric".into())),
            };
            let summary = commands::cmd_grade(
                GradeRequest {
                    source,
                    answers: &answers,
                    out_dir: &out_dir,
                    run_id,
                },
                &config,
            )
            .await?;
            write!(out, "{}", summary.render()).map_err(io)?;
            summary.outcome(config.partial_ok)?;
        }
        Command::Evaluate {
            results,
            gold,
            threshold,
            method,
            out: json_out,
        } => {
            let output = commands::cmd_evaluate(&results, &gold, threshold, &method)?;
            if let Some(path) = json_out {
                let text = serde_json::to_string_pretty(&output).expect("metrics serialize");
                commands::write_output(&path, &text)?;
            }
            write!(out, "{}", output.render()).map_err(io)?;
        }
        Command::Report {
            result,
            format,
            template,
        } => {
            let report = commands::cmd_report(&result, template.as_deref())?;
            match format {
                ReportFormat::Text => write!(out, "{}", report.text).map_err(io)?,
                ReportFormat::Json => writeln!(
                    out,
                    "{}",
                    serde_json::to_string_pretty(&report).expect("report serializes")
                )
                .map_err(io)?,
            }
        }
    }
    Ok(())
}

/// Parse `args`, run, and return the process exit code.
pub fn main_with(
    args: impl IntoIterator<Item = String>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if e.use_stderr() {
                write!(err, "{e}")
            } else {
                write!(out, "{e}")
            };
            return code;
        }
    };
    let runtime = match tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
    {
        Ok(rt) => rt,
        Err(e) => {
            let _ = writeln!(err, "error: cannot start runtime: {e}");
            return 3;
        }
    };
    match runtime.block_on(run(cli, out)) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

//! Run configuration, layered as flags > config file > environment > defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const ENV_PREFIX: &str = "RKTGRADE_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Remote,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mock" => Ok(BackendKind::Mock),
            "remote" => Ok(BackendKind::Remote),
            other => Err(format!(
                "unknown backend {other:?} (expected mock or remote)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunConfig {
    pub backend: BackendKind,
    pub depth_cap: usize,
    pub continuous_sp: bool,
    pub partial_ok: bool,
    pub concurrency_limit: usize,
    pub cache_dir: PathBuf,
    /// `default` for the shipped prompts, otherwise a directory of templates.
    pub template_set: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Mock,
            depth_cap: 4,
            continuous_sp: false,
            partial_ok: false,
            concurrency_limit: 8,
            cache_dir: PathBuf::from(".rkt-cache"),
            template_set: "default".into(),
        }
    }
}

/// One configuration layer; unset fields fall through to the next.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigLayer {
    pub backend: Option<BackendKind>,
    pub depth_cap: Option<usize>,
    pub continuous_sp: Option<bool>,
    pub partial_ok: Option<bool>,
    pub concurrency_limit: Option<usize>,
    pub cache_dir: Option<PathBuf>,
    pub template_set: Option<String>,
}

impl ConfigLayer {
    /// Read a TOML file, or JSON when the extension is `.json`.
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| CliError::Input(format!("invalid config {}: {e}", path.display())))
    }

    /// Read `RKTGRADE_*` variables through `lookup`.
    pub fn from_env_with(lookup: impl Fn(&str) -> Option<String>) -> CliResult<Self> {
        fn parse<T: std::str::FromStr>(name: &str, raw: Option<String>) -> CliResult<Option<T>>
        where
            T::Err: std::fmt::Display,
        {
            raw.map(|v| {
                v.trim()
                    .parse()
                    .map_err(|e| CliError::Input(format!("{ENV_PREFIX}{name}: {e}")))
            })
            .transpose()
        }
        let get =
            |name: &str| lookup(&format!("{ENV_PREFIX}{name}")).filter(|v| !v.trim().is_empty());
        Ok(Self {
            backend: parse("BACKEND", get("BACKEND"))?,
            depth_cap: parse("DEPTH_CAP", get("DEPTH_CAP"))?,
            continuous_sp: parse("CONTINUOUS_SP", get("CONTINUOUS_SP"))?,
            partial_ok: parse("PARTIAL_OK", get("PARTIAL_OK"))?,
            concurrency_limit: parse("CONCURRENCY", get("CONCURRENCY"))?,
            cache_dir: get("CACHE_DIR").map(PathBuf::from),
            template_set: get("TEMPLATE_SET"),
        })
    }

    pub fn from_env() -> CliResult<Self> {
        Self::from_env_with(|k| std::env::var(k).ok())
    }

    /// Fields set here win over `lower`.
    pub fn over(self, lower: ConfigLayer) -> ConfigLayer {
        ConfigLayer {
            backend: self.backend.or(lower.backend),
            depth_cap: self.depth_cap.or(lower.depth_cap),
            continuous_sp: self.continuous_sp.or(lower.continuous_sp),
            partial_ok: self.partial_ok.or(lower.partial_ok),
            concurrency_limit: self.concurrency_limit.or(lower.concurrency_limit),
            cache_dir: self.cache_dir.or(lower.cache_dir),
            template_set: self.template_set.or(lower.template_set),
        }
    }

    pub fn resolve(self) -> CliResult<RunConfig> {
        let d = RunConfig::default();
        let config = RunConfig {
            backend: self.backend.unwrap_or(d.backend),
            depth_cap: self.depth_cap.unwrap_or(d.depth_cap),
            continuous_sp: self.continuous_sp.unwrap_or(d.continuous_sp),
            partial_ok: self.partial_ok.unwrap_or(d.partial_ok),
            concurrency_limit: self.concurrency_limit.unwrap_or(d.concurrency_limit),
            cache_dir: self.cache_dir.unwrap_or(d.cache_dir),
            template_set: self.template_set.unwrap_or(d.template_set),
        };
        if config.depth_cap < 1 {
            return Err(CliError::Input("depth_cap must be at least 1".into()));
        }
        if config.concurrency_limit < 1 {
            return Err(CliError::Input("concurrency must be at least 1".into()));
        }
        Ok(config)
    }
}

/// Combine flags, an optional config file and the environment.
pub fn layered(flags: ConfigLayer, file: Option<&Path>, env: ConfigLayer) -> CliResult<RunConfig> {
    let file_layer = match file {
        Some(p) => ConfigLayer::from_file(p)?,
        None => ConfigLayer::default(),
    };
    flags.over(file_layer).over(env).resolve()
}

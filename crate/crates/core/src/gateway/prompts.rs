//! Prompt templates for the remote backend, one per task kind.

use std::path::Path;

use minijinja::Environment;
use serde_json::Value;

use super::task::TaskKind;

/// Bumped whenever the shipped templates change; part of tree cache keys.
pub const TEMPLATE_VERSION: &str = "1";

const SYSTEM: &str = include_str!("../../templates/prompts/system.j2");
const CTM: &str = include_str!("../../templates/prompts/ctm.j2");
const CSC: &str = include_str!("../../templates/prompts/csc.j2");
const SSR: &str = include_str!("../../templates/prompts/ssr.j2");
const SEGMENT: &str = include_str!("../../templates/prompts/segment.j2");

fn template_name(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Ctm => "ctm.j2",
        TaskKind::Csc => "csc.j2",
        TaskKind::Ssr => "ssr.j2",
        TaskKind::Segment => "segment.j2",
    }
}

/// Rendered chat messages for one task call.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

pub struct PromptSet {
    env: Environment<'static>,
    version: String,
}

impl std::fmt::Debug for PromptSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PromptSet")
            .field("version", &self.version)
            .finish()
    }
}

impl Default for PromptSet {
    fn default() -> Self {
        let mut env = Environment::new();
        for (name, source) in [
            ("system.j2", SYSTEM),
            ("ctm.j2", CTM),
            ("csc.j2", CSC),
            ("ssr.j2", SSR),
            ("segment.j2", SEGMENT),
        ] {
            env.add_template(name, source)
                .expect("shipped templates compile");
        }
        Self {
            env,
            version: TEMPLATE_VERSION.to_string(),
        }
    }
}

impl PromptSet {
    /// Load `system.j2`, `ctm.j2`, `csc.j2`, `ssr.j2` and `segment.j2` from a directory.
    pub fn from_dir(dir: &Path) -> Result<Self, String> {
        let mut env = Environment::new();
        let mut hasher_input = String::new();
        for name in ["system.j2", "ctm.j2", "csc.j2", "ssr.j2", "segment.j2"] {
            let path = dir.join(name);
            let source = std::fs::read_to_string(&path)
                .map_err(|e| format!("cannot read template {}: {e}", path.display()))?;
            hasher_input.push_str(&source);
            env.add_template_owned(name.to_string(), source)
                .map_err(|e| format!("template {name} does not compile: {e}"))?;
        }
        Ok(Self {
            env,
            version: format!("dir:{}", crate::hash::digest_hex(hasher_input.as_bytes())),
        })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn render(&self, kind: TaskKind, payload: &Value) -> Result<Prompt, String> {
        let render = |name: &str| {
            self.env
                .get_template(name)
                .and_then(|t| t.render(payload))
                .map_err(|e| format!("cannot render {name}: {e}"))
        };
        Ok(Prompt {
            system: render("system.j2")?,
            user: render(template_name(kind))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn every_task_renders_its_inputs() {
        let prompts = PromptSet::default();
        let ctm = prompts
            .render(
                TaskKind::Ctm,
                &json!({"criteria": "Define overfitting.", "policy": ["p1", "p2"]}),
            )
            .unwrap();
        assert!(ctm.user.contains("Define overfitting.") && ctm.user.contains("- p2"));
        assert!(ctm.system.contains("JSON"));

        let csc = prompts
            .render(
                TaskKind::Csc,
                &json!({"child_rules": ["a rule", "b rule"], "parent_subconditions": [{"quality": "good", "score": 0.5}]}),
            )
            .unwrap();
        assert!(csc.user.contains("1. b rule") && csc.user.contains("(0.5) good"));

        let ssr = prompts
            .render(
                TaskKind::Ssr,
                &json!({"answer_segment": "ANSWER", "criteria": "RULE", "subconditions": [], "continuous": false}),
            )
            .unwrap();
        assert!(ssr.user.contains("ANSWER") && ssr.user.contains("(none)"));
        assert!(!ssr.user.contains("| number"));

        let seg = prompts
            .render(
                TaskKind::Segment,
                &json!({"answer": "TEXT", "row_rule": "ROW"}),
            )
            .unwrap();
        assert!(seg.user.contains("TEXT") && seg.user.contains("ROW"));
    }

    #[test]
    fn loads_templates_from_directory() {
        let dir = std::env::temp_dir().join(format!("rkt-prompts-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        for name in ["system.j2", "ctm.j2", "csc.j2", "ssr.j2", "segment.j2"] {
            std::fs::write(dir.join(name), format!("{name}: {{{{ criteria }}}}")).unwrap();
        }
        let set = PromptSet::from_dir(&dir).unwrap();
        assert!(set.version().starts_with("dir:"));
        let p = set
            .render(TaskKind::Ctm, &json!({"criteria": "X"}))
            .unwrap();
        assert_eq!(p.user, "ctm.j2: X");
        std::fs::remove_dir_all(&dir).unwrap();
    }
}

//! Prompt templates with `[slot]` placeholders.
//!
//! Bodies ship in `templates/*.txt` and are embedded at compile time; a
//! template directory can override any of them by file name.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("template `{template}`: slot `{slot}` is not bound")]
    MissingSlot { template: String, slot: String },
}

#[derive(Debug, Error)]
pub enum TemplateLoadError {
    #[error("cannot read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("template override {path} lacks required slot `[{slot}]`")]
    MissingSlot { path: String, slot: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub template_id: String,
    pub body: String,
    pub required_slots: Vec<String>,
    /// Authored here rather than taken from a published prompt.
    pub authored: bool,
}

struct Builtin {
    id: &'static str,
    body: &'static str,
    slots: &'static [&'static str],
    authored: bool,
}

macro_rules! builtin {
    ($id:literal, [$($slot:literal),*], $authored:expr) => {
        Builtin {
            id: $id,
            body: include_str!(concat!("../../templates/", $id, ".txt")),
            slots: &[$($slot),*],
            authored: $authored,
        }
    };
}

pub const FLUENCY_CHECK: &str = "fluency-check";
pub const SIMILARITY_CHECK: &str = "similarity-check";
pub const MULTI_LLM_CHECK: &str = "multi-llm-check";
pub const FINETUNE_CHECK: &str = "finetune-check";
pub const SEMANTIC_SUGGEST: &str = "semantic-suggest";
pub const SEMANTIC_FIX: &str = "semantic-fix";
pub const SYNTAX_FIX: &str = "syntax-fix";
pub const ENSEMBLE_SELECT: &str = "ensemble-select";
pub const EXTRACT_KEYWORDS: &str = "extract-keywords";
pub const SECOND_FILTER: &str = "second-filter";
pub const QUERY_DIFFUSION: &str = "query-diffusion";
pub const EXAMPLE_DIFFUSION: &str = "example-diffusion";
pub const SQL_INTERPRET: &str = "sql-interpret";
pub const SQL_SUMMARIZE: &str = "sql-summarize";
pub const QUERY2SQL: &str = "query2sql";

const BUILTINS: &[Builtin] = &[
    builtin!("fluency-check", ["query"], false),
    builtin!("similarity-check", ["query1", "query2"], false),
    builtin!("multi-llm-check", ["query", "table_info", "SQL"], false),
    builtin!("finetune-check", ["query", "table_info", "sql"], false),
    builtin!("semantic-suggest", ["question", "SQL", "table_info"], false),
    builtin!("semantic-fix", ["suggestion", "question", "SQL", "table_info"], false),
    builtin!("syntax-fix", ["error", "question", "sql", "table_info"], false),
    builtin!("ensemble-select", ["question", "table_info", "matched_values", "options"], false),
    builtin!("extract-keywords", ["question", "evidence"], true),
    builtin!("second-filter", ["question", "keywords", "matched_values", "table_info"], true),
    builtin!("query-diffusion", ["k", "question", "SQL", "table_info"], true),
    builtin!("example-diffusion", ["question", "SQL", "table_info"], true),
    builtin!("sql-interpret", ["SQL", "table_info"], true),
    builtin!("sql-summarize", ["SQL", "table_info", "interpretation"], true),
    builtin!("query2sql", ["k", "table_info"], true),
];

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateRegistry {
    templates: BTreeMap<String, PromptTemplate>,
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateRegistry {
    pub fn builtin() -> Self {
        let templates = BUILTINS
            .iter()
            .map(|b| {
                (
                    b.id.to_string(),
                    PromptTemplate {
                        template_id: b.id.to_string(),
                        body: b.body.to_string(),
                        required_slots: b.slots.iter().map(|s| s.to_string()).collect(),
                        authored: b.authored,
                    },
                )
            })
            .collect();
        Self { templates }
    }

    /// Built-in templates, with `<dir>/<template_id>.txt` replacing the
    /// body of any template that has such a file.
    pub fn with_overrides(dir: &Path) -> Result<Self, TemplateLoadError> {
        let mut reg = Self::builtin();
        for t in reg.templates.values_mut() {
            let path = dir.join(format!("{}.txt", t.template_id));
            if !path.is_file() {
                continue;
            }
            let body = fs::read_to_string(&path).map_err(|source| TemplateLoadError::Io {
                path: path.display().to_string(),
                source,
            })?;
            if let Some(slot) = t
                .required_slots
                .iter()
                .find(|s| !body.contains(&format!("[{s}]")))
            {
                return Err(TemplateLoadError::MissingSlot {
                    path: path.display().to_string(),
                    slot: slot.clone(),
                });
            }
            t.body = body;
        }
        Ok(reg)
    }

    pub fn get(&self, id: &str) -> Option<&PromptTemplate> {
        self.templates.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn render(&self, id: &str, bindings: &[(&str, &str)]) -> Result<String, RenderError> {
        let t = self
            .get(id)
            .ok_or_else(|| RenderError::UnknownTemplate(id.to_string()))?;
        t.render(bindings)
    }
}

impl PromptTemplate {
    /// Substitute every `[slot]` for a declared slot in one pass; bound text
    /// is never rescanned, and bracketed text that is not a declared slot is
    /// left alone. Extra bindings are ignored.
    pub fn render(&self, bindings: &[(&str, &str)]) -> Result<String, RenderError> {
        let mut values: BTreeMap<&str, &str> = BTreeMap::new();
        for slot in &self.required_slots {
            let v = bindings
                .iter()
                .find(|(k, _)| k == slot)
                .map(|(_, v)| *v)
                .ok_or_else(|| RenderError::MissingSlot {
                    template: self.template_id.clone(),
                    slot: slot.clone(),
                })?;
            values.insert(slot.as_str(), v);
        }
        let body = self.body.as_str();
        let mut out = String::with_capacity(body.len() + 256);
        let mut rest = body;
        while let Some(open) = rest.find('[') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let slot = after
                .find(']')
                .map(|close| &after[..close])
                .filter(|name| values.contains_key(name));
            match slot {
                Some(name) => {
                    out.push_str(values[name]);
                    rest = &after[name.len() + 1..];
                }
                None => {
                    out.push('[');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_builtin_declares_its_slots() {
        let reg = TemplateRegistry::builtin();
        for id in reg.ids() {
            let t = reg.get(id).unwrap();
            for s in &t.required_slots {
                assert!(t.body.contains(&format!("[{s}]")), "{id} lacks [{s}]");
            }
        }
        assert_eq!(reg.ids().count(), 15);
    }

    #[test]
    fn fluency_prompt_text() {
        let out = TemplateRegistry::builtin()
            .render(FLUENCY_CHECK, &[("query", "list all schools")])
            .unwrap();
        assert_eq!(
            out,
            "Please determine whether the following statements are fluent. Answer yes or no. list all schools"
        );
    }

    #[test]
    fn missing_slot_is_named() {
        let err = TemplateRegistry::builtin()
            .render(MULTI_LLM_CHECK, &[("query", "q"), ("SQL", "s")])
            .unwrap_err();
        assert_eq!(
            err,
            RenderError::MissingSlot {
                template: MULTI_LLM_CHECK.into(),
                slot: "table_info".into()
            }
        );
    }

    #[test]
    fn substitution_is_single_pass_and_ignores_extras() {
        let out = TemplateRegistry::builtin()
            .render(
                SIMILARITY_CHECK,
                &[("query1", "[query2] stays"), ("query2", "b"), ("unused", "x")],
            )
            .unwrap();
        assert!(out.ends_with("1. [query2] stays\n2. b"), "{out}");
    }

    #[test]
    fn non_slot_brackets_survive() {
        let out = TemplateRegistry::builtin()
            .render(
                SEMANTIC_SUGGEST,
                &[("question", "Q"), ("SQL", "S"), ("table_info", "T")],
            )
            .unwrap();
        assert!(out.contains("VALUES: [313 West Winton Ave.],"));
        assert!(out.ends_with("### Questions:\nQ\n### SQLite Query:\nS\n### Tables:\nT\n### Response:"));
    }

    #[test]
    fn overrides_replace_bodies_and_are_validated() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("fluency-check.txt"), "Fluent? [query]").unwrap();
        let reg = TemplateRegistry::with_overrides(dir.path()).unwrap();
        assert_eq!(reg.render(FLUENCY_CHECK, &[("query", "x")]).unwrap(), "Fluent? x");
        fs::write(dir.path().join("syntax-fix.txt"), "no slots").unwrap();
        assert!(matches!(
            TemplateRegistry::with_overrides(dir.path()),
            Err(TemplateLoadError::MissingSlot { .. })
        ));
    }
}

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::artifact::sha256_hex;
use crate::augment::AugmentConfig;
use crate::catalog::IndexConfig;
use crate::correct::DEFAULT_SYNTAX_ROUNDS;
use crate::dataset::ModelHandle;
use crate::exec::ExecConfig;
use crate::judge::{Decoding, EndpointConfig, RetryPolicy, DEFAULT_MAX_REASKS};
use crate::linking::LinkConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    /// Replay from the transcript store; a miss is an error.
    #[default]
    Mock,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySection {
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    pub max_reasks: u32,
    pub decoding: Decoding,
}

impl Default for GatewaySection {
    fn default() -> Self {
        Self {
            retry: RetryPolicy::default(),
            max_in_flight: 8,
            max_reasks: DEFAULT_MAX_REASKS,
            decoding: Decoding::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkSection {
    #[serde(flatten)]
    pub params: LinkConfig,
    /// Keyword extraction and second filter; lexical-only linking without.
    pub judge: Option<String>,
    /// Remote relevance scorer; the lexical scorer is used when unset.
    pub scorer_url: Option<String>,
    pub scorer_timeout_ms: u64,
}

impl Default for LinkSection {
    fn default() -> Self {
        Self {
            params: LinkConfig::default(),
            judge: None,
            scorer_url: None,
            scorer_timeout_ms: 30_000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub judges: Vec<String>,
    /// Judge for the query checks; the first judge when unset.
    pub query_judge: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSection {
    #[serde(flatten)]
    pub params: AugmentConfig,
    pub generators: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectSection {
    pub judge: Option<String>,
    pub max_syntax_rounds: usize,
}

impl Default for CorrectSection {
    fn default() -> Self {
        Self {
            judge: None,
            max_syntax_rounds: DEFAULT_SYNTAX_ROUNDS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub judge: Option<String>,
}

/// The single run configuration file (TOML). Relative paths resolve
/// against the file's directory. Secrets never live here: endpoints name
/// the environment variable that holds their key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub db_root: PathBuf,
    #[serde(default)]
    pub template_dir: Option<PathBuf>,
    #[serde(default)]
    pub backend: Backend,
    #[serde(default)]
    pub transcripts: Option<PathBuf>,
    #[serde(default)]
    pub models: Vec<ModelHandle>,
    #[serde(default)]
    pub endpoints: BTreeMap<String, EndpointConfig>,
    #[serde(default)]
    pub gateway: GatewaySection,
    #[serde(default)]
    pub exec: ExecConfig,
    #[serde(default)]
    pub index: IndexConfig,
    #[serde(default)]
    pub link: LinkSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub correct: CorrectSection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
}

impl PipelineConfig {
    /// Defaults everywhere except the database root.
    pub fn with_db_root(db_root: impl Into<PathBuf>) -> Self {
        Self {
            db_root: db_root.into(),
            template_dir: None,
            backend: Backend::Mock,
            transcripts: None,
            models: Vec::new(),
            endpoints: BTreeMap::new(),
            gateway: GatewaySection::default(),
            exec: ExecConfig::default(),
            index: IndexConfig::default(),
            link: LinkSection::default(),
            verify: VerifySection::default(),
            augment: AugmentSection::default(),
            correct: CorrectSection::default(),
            ensemble: EnsembleSection::default(),
        }
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    /// Read, resolve and validate.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg = Self::parse(&text, path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.db_root);
        if let Some(p) = self.template_dir.as_mut() {
            fix(p);
        }
        if let Some(p) = self.transcripts.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !self.db_root.is_dir() {
            return bad(format!("db_root {} is not a directory", self.db_root.display()));
        }
        if let Some(d) = &self.template_dir {
            if !d.is_dir() {
                return bad(format!("template_dir {} is not a directory", d.display()));
            }
        }
        if self.backend == Backend::Mock {
            if let Some(t) = &self.transcripts {
                if !t.is_file() {
                    return bad(format!("transcript store {} does not exist", t.display()));
                }
            }
        }
        let mut names = BTreeSet::new();
        for m in &self.models {
            if m.name.trim().is_empty() {
                return bad("model with an empty name".into());
            }
            if !names.insert(m.name.as_str()) {
                return bad(format!("model `{}` is defined twice", m.name));
            }
            if self.backend == Backend::Live {
                let key = if m.endpoint_config_key.is_empty() { &m.name } else { &m.endpoint_config_key };
                if !self.endpoints.contains_key(key) {
                    return bad(format!("model `{}` has no endpoint `{key}`", m.name));
                }
            }
        }
        for name in self.referenced_models() {
            if !names.contains(name) {
                return bad(format!("unknown model `{name}`"));
            }
        }
        if !self.verify.judges.is_empty() && self.verify.judges.len() % 2 == 0 {
            return bad(format!("verify.judges needs an odd count, got {}", self.verify.judges.len()));
        }
        self.link.params.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let a = &self.augment.params;
        if a.k == 0 || a.query2sql_k == 0 || a.iteration_cap == 0 {
            return bad("augment k, query2sql_k and iteration_cap must be at least 1".into());
        }
        if self.exec.timeout_ms == 0 || self.exec.row_cap == 0 {
            return bad("exec timeout_ms and row_cap must be positive".into());
        }
        if self.gateway.max_in_flight == 0 {
            return bad("gateway.max_in_flight must be at least 1".into());
        }
        Ok(())
    }

    fn referenced_models(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        out.extend(self.link.judge.as_deref());
        out.extend(self.verify.judges.iter().map(String::as_str));
        out.extend(self.verify.query_judge.as_deref());
        out.extend(self.augment.generators.iter().map(String::as_str));
        out.extend(self.correct.judge.as_deref());
        out.extend(self.ensemble.judge.as_deref());
        out
    }

    /// Hash of the parsed config with object keys sorted, so files that
    /// differ only in key order hash the same.
    pub fn hash(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut s = String::new();
        canonical(&v, &mut s);
        sha256_hex(s.as_bytes())
    }
}

pub(crate) fn canonical(v: &Value, out: &mut String) {
    match v {
        Value::Object(map) => {
            let sorted: BTreeMap<&String, &Value> = map.iter().collect();
            out.push('{');
            for (i, (k, v)) in sorted.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                canonical(v, out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, v) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                canonical(v, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}

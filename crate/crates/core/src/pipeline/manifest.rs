use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::config::{canonical, ConfigError};
use super::Runtime;
use crate::artifact::{self, sha256_file, sha256_hex, Artifact, ArtifactError};
use crate::augment::AugmentError;
use crate::catalog::CatalogError;
use crate::correct::CorrectError;
use crate::dataset::{CoverageError, DatasetError};
use crate::ensemble::EnsembleError;
use crate::linking::LinkError;
use crate::repair::RepairError;
use crate::verify::VerifyError;

#[derive(Debug, Error)]
pub enum StageError {
    #[error("input `{role}` missing: {path}")]
    MissingInput { role: String, path: PathBuf },
    #[error("stage produced undeclared output {0}")]
    UndeclaredOutput(PathBuf),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Coverage(#[from] CoverageError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Repair(#[from] RepairError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Correct(#[from] CorrectError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

/// Config problems exit with 2, stage failures with 1.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: StageError,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    /// Stage name plus a hash of its parameters; reruns with the same key
    /// replace the entry.
    pub key: String,
    pub status: StageStatus,
    pub config_hash: String,
    pub params: Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub wall_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub summary: Value,
}

impl StageRecord {
    pub fn output(&self, role: &str) -> Option<&FileHash> {
        self.outputs.iter().find(|f| f.role == role)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, ArtifactError> {
        let text = fs::read_to_string(path).map_err(|source| ArtifactError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if text.trim().is_empty() {
            return Ok(Self::default());
        }
        serde_json::from_str(&text).map_err(|e| ArtifactError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    fn load_or_new(path: &Path, config_hash: &str) -> Result<Self, ArtifactError> {
        let mut m = if path.is_file() { Self::load(path)? } else { Self::default() };
        if m.run_id.is_empty() {
            m.run_id = config_hash[..12].to_string();
        }
        m.config_hash = config_hash.to_string();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), ArtifactError> {
        ensure_parent(path)?;
        artifact::write_json(self, path)
    }

    pub fn find(&self, key: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.key == key)
    }

    fn upsert(&mut self, record: StageRecord) {
        match self.stages.iter_mut().find(|s| s.key == record.key) {
            Some(slot) => *slot = record,
            None => self.stages.push(record),
        }
    }
}

fn ensure_parent(path: &Path) -> Result<(), ArtifactError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|source| ArtifactError::Io {
            path: dir.to_path_buf(),
            source,
        }),
        _ => Ok(()),
    }
}

/// Buffered stage outputs plus a JSON summary for the manifest.
#[derive(Debug, Default)]
pub struct Products {
    files: Vec<(PathBuf, Vec<u8>)>,
    pub summary: Value,
}

impl Products {
    pub fn new(summary: Value) -> Self {
        Self {
            files: Vec::new(),
            summary,
        }
    }

    pub fn jsonl<T: Artifact>(&mut self, path: &Path, items: &[T]) -> Result<(), ArtifactError> {
        self.files.push((path.to_path_buf(), artifact::artifact_bytes(items)?));
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, path: &Path, value: &T) -> Result<(), ArtifactError> {
        self.files.push((path.to_path_buf(), artifact::json_bytes(value)?));
        Ok(())
    }

    pub fn paths(&self) -> impl Iterator<Item = &Path> {
        self.files.iter().map(|(p, _)| p.as_path())
    }
}

/// One pipeline stage: its declared files and its body.
pub trait Stage: Serialize {
    const NAME: &'static str;

    /// `(role, path)` for every file read.
    fn inputs(&self) -> Vec<(&'static str, PathBuf)>;

    /// `(role, path)` for every file written.
    fn outputs(&self) -> Vec<(&'static str, PathBuf)>;

    /// Checks that need the runtime but not the inputs (model names,
    /// flag combinations). Failures here are config errors.
    fn check(&self, _rt: &Runtime) -> Result<(), ConfigError> {
        Ok(())
    }

    fn run(&self, rt: &Runtime) -> Result<Products, StageError>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum StageOutcome {
    Ran(StageRecord),
    /// `--resume` found a successful entry with identical hashes.
    Skipped(StageRecord),
}

impl StageOutcome {
    pub fn record(&self) -> &StageRecord {
        match self {
            StageOutcome::Ran(r) | StageOutcome::Skipped(r) => r,
        }
    }
}

fn hash_files(files: &[(&'static str, PathBuf)]) -> Result<Vec<FileHash>, StageError> {
    files
        .iter()
        .map(|(role, path)| {
            if !path.is_file() {
                return Err(StageError::MissingInput {
                    role: role.to_string(),
                    path: path.clone(),
                });
            }
            Ok(FileHash {
                role: role.to_string(),
                path: path.clone(),
                sha256: sha256_file(path)?,
            })
        })
        .collect()
}

fn up_to_date(prev: &StageRecord, config_hash: &str, inputs: &[FileHash]) -> bool {
    prev.status == StageStatus::Ok
        && prev.config_hash == config_hash
        && prev.inputs == inputs
        && prev
            .outputs
            .iter()
            .all(|o| o.path.is_file() && sha256_file(&o.path).is_ok_and(|h| h == o.sha256))
}

/// Run one stage and record it in the manifest at `manifest_path`.
pub fn run_stage<S: Stage>(
    rt: &Runtime,
    manifest_path: &Path,
    stage: &S,
    resume: bool,
) -> Result<StageOutcome, PipelineError> {
    stage.check(rt)?;
    let params = serde_json::to_value(stage).expect("stage params serialize");
    let mut canon = String::new();
    canonical(&params, &mut canon);
    let key = format!("{}:{}", S::NAME, &sha256_hex(canon.as_bytes())[..16]);
    let fail = |source: StageError| PipelineError::Stage {
        stage: S::NAME.to_string(),
        source,
    };
    let mut manifest = RunManifest::load_or_new(manifest_path, rt.config_hash()).map_err(|e| fail(e.into()))?;
    let mut record = StageRecord {
        stage: S::NAME.to_string(),
        key: key.clone(),
        status: StageStatus::Failed,
        config_hash: rt.config_hash().to_string(),
        params,
        inputs: Vec::new(),
        outputs: Vec::new(),
        wall_ms: 0,
        error: None,
        summary: Value::Null,
    };

    let started = Instant::now();
    let result = hash_files(&stage.inputs()).and_then(|inputs| {
        record.inputs = inputs;
        if resume {
            if let Some(prev) = manifest.find(&key) {
                if up_to_date(prev, rt.config_hash(), &record.inputs) {
                    return Ok(None);
                }
            }
        }
        log::info!("{}: running", S::NAME);
        let products = stage.run(rt)?;
        let declared: Vec<(&'static str, PathBuf)> = stage.outputs();
        for p in products.paths() {
            if !declared.iter().any(|(_, d)| d == p) {
                return Err(StageError::UndeclaredOutput(p.to_path_buf()));
            }
        }
        Ok(Some((products, declared)))
    });

    let outcome = match result {
        Ok(None) => {
            log::info!("{}: up to date, skipped", S::NAME);
            return Ok(StageOutcome::Skipped(manifest.find(&key).expect("found above").clone()));
        }
        Ok(Some((products, declared))) => commit(rt, products, &declared).map(|(outputs, summary)| {
            record.outputs = outputs;
            record.summary = summary;
            record.status = StageStatus::Ok;
        }),
        Err(e) => Err(e),
    };
    record.wall_ms = started.elapsed().as_millis() as u64;
    if let Err(e) = &outcome {
        record.error = Some(e.to_string());
    }
    manifest.upsert(record.clone());
    manifest.save(manifest_path).map_err(|e| fail(e.into()))?;
    match outcome {
        Ok(()) => Ok(StageOutcome::Ran(record)),
        Err(e) => Err(fail(e)),
    }
}

fn commit(
    rt: &Runtime,
    products: Products,
    declared: &[(&'static str, PathBuf)],
) -> Result<(Vec<FileHash>, Value), StageError> {
    for (path, bytes) in &products.files {
        ensure_parent(path)?;
        artifact::write_atomic(path, bytes)?;
    }
    let mut outputs = Vec::new();
    for (path, _) in &products.files {
        let role = declared.iter().find(|(_, d)| d == path).map(|(r, _)| *r).unwrap_or_default();
        outputs.push(FileHash {
            role: role.to_string(),
            path: path.clone(),
            sha256: sha256_file(path)?,
        });
    }
    rt.flush_transcripts()?;
    if let Some(t) = rt.transcript_output() {
        outputs.push(FileHash {
            role: "transcripts".into(),
            path: t.clone(),
            sha256: sha256_file(t)?,
        });
    }
    Ok((outputs, products.summary))
}

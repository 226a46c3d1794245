//! Run configuration, the shared runtime, stage bookkeeping and reporting.
//!
//! Stages talk to each other only through files. Each stage declares its
//! inputs and outputs up front; [`run_stage`] hashes both into the run
//! manifest, writes outputs only after the stage succeeds and refuses writes
//! to undeclared paths.

mod config;
mod manifest;
mod report;
mod stages;

pub use config::{
    AugmentSection, Backend, ConfigError, CorrectSection, EnsembleSection, GatewaySection, LinkSection,
    PipelineConfig, VerifySection,
};
pub use manifest::{
    run_stage, FileHash, PipelineError, Products, RunManifest, Stage, StageError, StageOutcome, StageRecord,
    StageStatus,
};
pub use report::{build_report, RunReport, StageLine};
pub use stages::{
    AugmentStage, BuildChoiceSftStage, BuildSftStage, CorrectStage, EnsembleStage, EvalStage, Fallback, IngestStage,
    LinkStage, RepairStage, VerifyStage,
};

use crate::catalog::Catalog;
use crate::dataset::ModelHandle;
use crate::judge::{HttpGateway, Judge, JudgeClient, MockGateway, RecordingJudge, TemplateRegistry};
use crate::par::ExecMode;
use std::path::PathBuf;

enum Backing {
    Plain(Box<dyn Judge>),
    Recording(RecordingJudge<Box<dyn Judge>>, PathBuf),
}

/// Everything a stage needs: config, catalog, templates and the judge
/// backend.
pub struct Runtime {
    pub config: PipelineConfig,
    pub catalog: Catalog,
    pub templates: TemplateRegistry,
    pub exec_mode: ExecMode,
    config_hash: String,
    judge: Backing,
}

impl Runtime {
    /// Build the backend named by the config. `record` wraps a live backend
    /// so every response is appended to the transcript store.
    pub fn new(config: PipelineConfig, exec_mode: ExecMode, record: bool) -> Result<Self, ConfigError> {
        let judge: Box<dyn Judge> = match config.backend {
            Backend::Mock => {
                if record {
                    return Err(ConfigError::Invalid("--record needs the live backend".into()));
                }
                match &config.transcripts {
                    Some(p) => Box::new(MockGateway::load(p).map_err(|e| ConfigError::Invalid(e.to_string()))?),
                    None => Box::new(MockGateway::default()),
                }
            }
            Backend::Live => Box::new(HttpGateway::new(
                config.endpoints.clone(),
                config.gateway.retry,
                config.gateway.max_in_flight,
            )),
        };
        let backing = if record {
            let path = config
                .transcripts
                .clone()
                .ok_or_else(|| ConfigError::Invalid("--record needs a transcripts path".into()))?;
            Backing::Recording(RecordingJudge::new(judge), path)
        } else {
            Backing::Plain(judge)
        };
        Self::assemble(config, exec_mode, backing)
    }

    /// Runtime over a caller-supplied judge (scripted judges in tests).
    pub fn with_judge(config: PipelineConfig, exec_mode: ExecMode, judge: Box<dyn Judge>) -> Result<Self, ConfigError> {
        Self::assemble(config, exec_mode, Backing::Plain(judge))
    }

    fn assemble(config: PipelineConfig, exec_mode: ExecMode, judge: Backing) -> Result<Self, ConfigError> {
        config.validate()?;
        let templates = match &config.template_dir {
            Some(dir) => TemplateRegistry::with_overrides(dir).map_err(|e| ConfigError::Invalid(e.to_string()))?,
            None => TemplateRegistry::builtin(),
        };
        Ok(Self {
            catalog: Catalog::with_index_config(&config.db_root, config.index.clone()),
            templates,
            exec_mode,
            config_hash: config.hash(),
            config,
            judge,
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn judge(&self) -> &dyn Judge {
        match &self.judge {
            Backing::Plain(j) => j.as_ref(),
            Backing::Recording(r, _) => r,
        }
    }

    pub fn client(&self) -> JudgeClient<'_> {
        let mut c = JudgeClient::new(self.judge(), &self.templates);
        c.decoding = self.config.gateway.decoding;
        c.max_reasks = self.config.gateway.max_reasks;
        c
    }

    pub fn model(&self, name: &str) -> Result<&ModelHandle, ConfigError> {
        self.config
            .models
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown model `{name}`")))
    }

    /// Transcript store written when recording.
    pub fn transcript_output(&self) -> Option<&PathBuf> {
        match &self.judge {
            Backing::Recording(_, p) => Some(p),
            Backing::Plain(_) => None,
        }
    }

    pub(crate) fn flush_transcripts(&self) -> Result<(), crate::artifact::ArtifactError> {
        if let Backing::Recording(r, path) = &self.judge {
            let n = r.save(path)?;
            log::info!("{n} transcript entries in {}", path.display());
        }
        Ok(())
    }
}

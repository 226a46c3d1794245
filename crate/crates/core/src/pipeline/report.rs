use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::manifest::{RunManifest, StageRecord, StageStatus};
use crate::artifact::{read_artifact, sha256_file, ArtifactError};
use crate::augment::SftStats;
use crate::ensemble::SelectionOutcome;
use crate::exec::EvalReport;
use crate::repair::RepairReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLine {
    pub stage: String,
    pub key: String,
    pub status: StageStatus,
    pub wall_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub predictions: PathBuf,
    pub report: EvalReport,
}

/// Summary of everything a run manifest points at. Artifacts that are
/// missing or changed since they were recorded become `gaps`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub stages: Vec<StageLine>,
    pub eval: Vec<EvalSection>,
    pub repair: Vec<RepairReport>,
    pub sft: Vec<SftStats>,
    /// Selection method -> count over all ensemble stages.
    pub selection: BTreeMap<String, usize>,
    pub gaps: Vec<String>,
}

fn checked(record: &StageRecord, role: &str, gaps: &mut Vec<String>) -> Option<PathBuf> {
    let Some(f) = record.output(role) else {
        gaps.push(format!("{}: no `{role}` output recorded", record.key));
        return None;
    };
    match sha256_file(&f.path) {
        Ok(h) if h == f.sha256 => Some(f.path.clone()),
        Ok(_) => {
            gaps.push(format!("{}: {} changed since the stage ran", record.key, f.path.display()));
            None
        }
        Err(_) => {
            gaps.push(format!("{}: {} is missing", record.key, f.path.display()));
            None
        }
    }
}

fn read_doc<T: DeserializeOwned>(path: &Path, gaps: &mut Vec<String>) -> Option<T> {
    let parsed = std::fs::read_to_string(path)
        .map_err(|e| e.to_string())
        .and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string()));
    match parsed {
        Ok(v) => Some(v),
        Err(e) => {
            gaps.push(format!("{}: unreadable: {e}", path.display()));
            None
        }
    }
}

pub fn build_report(manifest_path: &Path) -> Result<RunReport, ArtifactError> {
    let manifest = RunManifest::load(manifest_path)?;
    let mut r = RunReport {
        run_id: manifest.run_id.clone(),
        ..RunReport::default()
    };
    for s in &manifest.stages {
        r.stages.push(StageLine {
            stage: s.stage.clone(),
            key: s.key.clone(),
            status: s.status,
            wall_ms: s.wall_ms,
            error: s.error.clone(),
        });
        if s.status == StageStatus::Failed {
            r.gaps.push(format!("{}: failed: {}", s.key, s.error.as_deref().unwrap_or("unknown error")));
            continue;
        }
        let gaps = &mut r.gaps;
        match s.stage.as_str() {
            "eval" => {
                if let Some(rep) = checked(s, "report", gaps).and_then(|p| read_doc::<EvalReport>(&p, gaps)) {
                    let predictions = s
                        .inputs
                        .iter()
                        .find(|f| f.role == "predictions")
                        .map(|f| f.path.clone())
                        .unwrap_or_default();
                    r.eval.push(EvalSection { predictions, report: rep });
                }
            }
            "repair" => {
                if let Some(rep) = checked(s, "report", gaps).and_then(|p| read_doc(&p, gaps)) {
                    r.repair.push(rep);
                }
            }
            "build-sft" => {
                if let Some(st) = checked(s, "stats", gaps).and_then(|p| read_doc(&p, gaps)) {
                    r.sft.push(st);
                }
            }
            "ensemble" => {
                if let Some(p) = checked(s, "outcomes", gaps) {
                    match read_artifact::<SelectionOutcome>(&p) {
                        Ok(outcomes) => {
                            for o in outcomes {
                                let m = serde_json::to_value(o.method).expect("method serializes");
                                *r.selection.entry(m.as_str().unwrap_or_default().to_string()).or_default() += 1;
                            }
                        }
                        Err(e) => gaps.push(format!("{}: unreadable: {e}", p.display())),
                    }
                }
            }
            _ => {}
        }
    }
    Ok(r)
}

impl RunReport {
    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        if self.is_empty() {
            out.push_str("no stages recorded\n");
            return out;
        }
        let _ = writeln!(out, "run {}", self.run_id);
        for s in &self.stages {
            let status = match s.status {
                StageStatus::Ok => "ok",
                StageStatus::Failed => "FAILED",
            };
            let _ = writeln!(out, "  {:<18} {:<7} {:>8} ms", s.stage, status, s.wall_ms);
        }
        for e in &self.eval {
            let _ = writeln!(out, "\nEX for {}", e.predictions.display());
            out.push_str(&e.report.render_table());
            if !e.report.invalid_gold.is_empty() {
                let _ = writeln!(out, "({} record(s) with invalid gold excluded)", e.report.invalid_gold.len());
            }
        }
        for rep in &self.repair {
            let _ = writeln!(
                out,
                "\nrepair: {} records, {} replaced, {} flagged, {} dropped",
                rep.total, rep.replaced, rep.flagged, rep.dropped
            );
        }
        for st in &self.sft {
            out.push('\n');
            out.push_str(&st.render_table());
            out.push('\n');
        }
        if !self.selection.is_empty() {
            out.push_str("\nselection:");
            for (m, n) in &self.selection {
                let _ = write!(out, " {m}={n}");
            }
            out.push('\n');
        }
        if !self.gaps.is_empty() {
            out.push_str("\ngaps:\n");
            for g in &self.gaps {
                let _ = writeln!(out, "  {g}");
            }
        }
        out
    }
}

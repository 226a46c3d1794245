//! Training-data repair: verify gold and predicted SQL and swap in the
//! prediction when only the prediction passes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::Artifact;
use crate::catalog::serialize_schema;
use crate::dataset::{join_predictions, CoverageError, DatasetSplit, PredictionFile, QuestionRecord};
use crate::par::{self, ExecMode};
use crate::sql::normalize_sql;
use crate::verify::{QueryPair, VerdictBundle, Verifier, VerifyError, VerifyMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairAction {
    Keep,
    Replace,
    FlagBothBad,
}

#[derive(Debug, Error)]
pub enum RepairError {
    #[error("bundle `{pair_id}` was produced in {found:?} mode, repair needs repair mode")]
    ModeMismatch { pair_id: String, found: VerifyMode },
    #[error(transparent)]
    Coverage(#[from] CoverageError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
}

/// Which SQL of a record is being verified.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqlRole {
    Gold,
    Predicted,
}

/// Anything that can produce a repair-mode bundle for one record's SQL.
pub trait PairVerifier: Sync {
    fn verify(&self, record: &QuestionRecord, sql: &str, role: SqlRole) -> Result<VerdictBundle, VerifyError>;
}

impl PairVerifier for Verifier<'_> {
    fn verify(&self, record: &QuestionRecord, sql: &str, role: SqlRole) -> Result<VerdictBundle, VerifyError> {
        let graph = self.catalog.graph(&record.db_id)?;
        let suffix = match role {
            SqlRole::Gold => "gold",
            SqlRole::Predicted => "pred",
        };
        let pair = QueryPair {
            pair_id: format!("{}:{suffix}", record.record_id),
            db_id: record.db_id.clone(),
            query: record.question_with_evidence(),
            sql: sql.to_string(),
            original_query: None,
            schema_text: Some(serialize_schema(&graph, None, None).expect("full schema always renders")),
        };
        self.verify_pair(&pair, VerifyMode::Repair)
    }
}

pub fn decide(gold: &VerdictBundle, pred: &VerdictBundle) -> Result<RepairAction, RepairError> {
    for b in [gold, pred] {
        if b.mode != VerifyMode::Repair {
            return Err(RepairError::ModeMismatch {
                pair_id: b.pair_id.clone(),
                found: b.mode,
            });
        }
    }
    Ok(action_for(gold.accepted(), pred.accepted()))
}

pub fn action_for(gold_ok: bool, pred_ok: bool) -> RepairAction {
    match (gold_ok, pred_ok) {
        (false, true) => RepairAction::Replace,
        (false, false) => RepairAction::FlagBothBad,
        (true, _) => RepairAction::Keep,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairDecision {
    pub record_id: String,
    pub gold_ok: bool,
    pub pred_ok: bool,
    pub action: RepairAction,
    pub gold_bundle: VerdictBundle,
    pub pred_bundle: VerdictBundle,
}

impl Artifact for RepairDecision {
    const KIND: &'static str = "repair_decision";
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RepairReport {
    pub total: usize,
    pub replaced: usize,
    pub flagged: usize,
    pub dropped: usize,
    pub replaced_ids: Vec<String>,
    pub flagged_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decisions_path: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RepairOutput {
    pub split: DatasetSplit,
    pub report: RepairReport,
    pub decisions: Vec<RepairDecision>,
}

fn decide_record(
    record: &QuestionRecord,
    pred_sql: &str,
    verifier: &dyn PairVerifier,
) -> Result<RepairDecision, RepairError> {
    let gold_bundle = verifier.verify(record, &record.gold_sql, SqlRole::Gold)?;
    // The same SQL gets the same verdict; skip the second round of calls.
    let pred_bundle = if normalize_sql(pred_sql) == normalize_sql(&record.gold_sql) {
        let mut b = gold_bundle.clone();
        b.pair_id = format!("{}:pred", record.record_id);
        b
    } else {
        verifier.verify(record, pred_sql, SqlRole::Predicted)?
    };
    let action = decide(&gold_bundle, &pred_bundle)?;
    Ok(RepairDecision {
        record_id: record.record_id.clone(),
        gold_ok: gold_bundle.accepted(),
        pred_ok: pred_bundle.accepted(),
        action,
        gold_bundle,
        pred_bundle,
    })
}

/// Record order and count are preserved unless `drop_flagged` is set.
pub fn repair_dataset(
    split: &DatasetSplit,
    preds: &PredictionFile,
    verifier: &dyn PairVerifier,
    mode: ExecMode,
    drop_flagged: bool,
) -> Result<RepairOutput, RepairError> {
    let joined = join_predictions(split, preds)?;
    let decisions = par::try_map(mode, &joined.pairs, |(record, pred)| decide_record(record, pred, verifier))?;
    let mut report = RepairReport {
        total: split.records.len(),
        ..RepairReport::default()
    };
    let mut records = Vec::with_capacity(split.records.len());
    for ((record, pred), d) in joined.pairs.iter().zip(&decisions) {
        let mut rec = (*record).clone();
        match d.action {
            RepairAction::Keep => {}
            RepairAction::Replace => {
                if rec.original_sql.is_none() {
                    rec.original_sql = Some(rec.gold_sql.clone());
                }
                rec.gold_sql = pred.clone();
                rec.repaired = true;
                report.replaced += 1;
                report.replaced_ids.push(rec.record_id.clone());
            }
            RepairAction::FlagBothBad => {
                report.flagged += 1;
                report.flagged_ids.push(rec.record_id.clone());
                if drop_flagged {
                    report.dropped += 1;
                    continue;
                }
            }
        }
        records.push(rec);
    }
    Ok(RepairOutput {
        split: DatasetSplit {
            name: split.name.clone(),
            records,
            source_format: split.source_format,
        },
        report,
        decisions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SourceFormat;
    use crate::verify::{Check, Overall};

    fn bundle(ok: bool, mode: VerifyMode) -> VerdictBundle {
        let mut b = VerdictBundle::new("x", mode);
        b.sql_legal = Some(true);
        b.consistent = Some(ok);
        b.checks_run = vec![Check::SqlCheck, Check::Consistency];
        b.finalize();
        b
    }

    #[test]
    fn truth_table() {
        let cases = [
            (true, true, RepairAction::Keep),
            (true, false, RepairAction::Keep),
            (false, true, RepairAction::Replace),
            (false, false, RepairAction::FlagBothBad),
        ];
        for (g, p, want) in cases {
            let got = decide(&bundle(g, VerifyMode::Repair), &bundle(p, VerifyMode::Repair)).unwrap();
            assert_eq!(got, want, "gold_ok={g} pred_ok={p}");
        }
        assert!(decide(&bundle(true, VerifyMode::Synthesis), &bundle(true, VerifyMode::Repair)).is_err());
    }

    /// Accepts SQL whose text contains the marker `ok`.
    struct Marker;

    impl PairVerifier for Marker {
        fn verify(&self, r: &QuestionRecord, sql: &str, _: SqlRole) -> Result<VerdictBundle, VerifyError> {
            let mut b = VerdictBundle::new(&r.record_id, VerifyMode::Repair);
            b.overall = if sql.contains("ok") { Overall::Accept } else { Overall::Reject };
            Ok(b)
        }
    }

    fn record(i: usize, gold: &str) -> QuestionRecord {
        QuestionRecord {
            record_id: format!("t:{i}"),
            question: format!("q{i}"),
            evidence: String::new(),
            db_id: "school".into(),
            gold_sql: gold.into(),
            difficulty: Default::default(),
            repaired: false,
            original_sql: None,
            extra: Default::default(),
        }
    }

    fn split(golds: &[&str]) -> DatasetSplit {
        DatasetSplit {
            name: "t".into(),
            records: golds.iter().enumerate().map(|(i, g)| record(i, g)).collect(),
            source_format: SourceFormat::Bird,
        }
    }

    fn preds(sqls: &[&str]) -> PredictionFile {
        PredictionFile {
            model_handle: "m".into(),
            entries: sqls.iter().enumerate().map(|(i, s)| (format!("t:{i}"), s.to_string())).collect(),
        }
    }

    #[test]
    fn replaces_flags_and_is_idempotent() {
        let s = split(&["SELECT 'ok'", "SELECT 'bad'", "SELECT 'bad'", "SELECT 'ok'"]);
        let p = preds(&["SELECT 'ok', 2", "SELECT 'ok'", "SELECT 'worse'", "SELECT 'ok'"]);
        let out = repair_dataset(&s, &p, &Marker, ExecMode::Sequential, false).unwrap();
        assert_eq!((out.report.replaced, out.report.flagged), (1, 1));
        assert_eq!(out.split.records.len(), 4);
        let r1 = &out.split.records[1];
        assert!(r1.repaired);
        assert_eq!(r1.gold_sql, "SELECT 'ok'");
        assert_eq!(r1.original_sql.as_deref(), Some("SELECT 'bad'"));

        let again = repair_dataset(&out.split, &p, &Marker, ExecMode::Parallel, false).unwrap();
        assert_eq!(again.split.records, out.split.records);
        assert_eq!(again.report.replaced, 0);

        let dropped = repair_dataset(&s, &p, &Marker, ExecMode::Sequential, true).unwrap();
        assert_eq!(dropped.split.records.len(), 3);
        assert_eq!(dropped.report.dropped, 1);
    }

    #[test]
    fn identical_predictions_change_nothing() {
        let golds = ["SELECT 'ok'", "SELECT 'ok' "];
        let out = repair_dataset(&split(&golds), &preds(&golds), &Marker, ExecMode::Sequential, false).unwrap();
        assert_eq!((out.report.replaced, out.report.flagged), (0, 0));
    }

    #[test]
    fn coverage_errors_propagate() {
        let err = repair_dataset(&split(&["a", "b"]), &preds(&["a"]), &Marker, ExecMode::Sequential, false).unwrap_err();
        assert!(matches!(err, RepairError::Coverage(c) if c.missing == ["t:1"]));
    }
}

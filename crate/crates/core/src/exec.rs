//! SQL execution against SQLite files, result comparison, Execution Accuracy
//! and grouping of candidates by execution result.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use rusqlite::{Connection, ErrorCode};
use serde::{Deserialize, Serialize};

use crate::artifact::{sha256_hex, Artifact};
use crate::catalog::{open_read_only, Catalog};
use crate::dataset::Difficulty;
use crate::par::{self, ExecMode};
use crate::value::{CanonValue, SqlValue};

pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;
pub const DEFAULT_ROW_CAP: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecConfig {
    pub timeout_ms: u64,
    pub row_cap: usize,
}

impl Default for ExecConfig {
    fn default() -> Self {
        Self {
            timeout_ms: DEFAULT_TIMEOUT_MS,
            row_cap: DEFAULT_ROW_CAP,
        }
    }
}

impl ExecConfig {
    pub fn with_timeout(timeout_ms: u64) -> Self {
        Self {
            timeout_ms,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Rows,
    DbError,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub status: ExecStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<Vec<Vec<SqlValue>>>,
    /// Rows stopped at the row cap.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_message: Option<String>,
    /// Wall-clock time. Not serialized so artifacts stay byte-reproducible.
    #[serde(skip)]
    pub elapsed_ms: u64,
}

impl ExecutionOutcome {
    pub fn rows(rows: Vec<Vec<SqlValue>>) -> Self {
        Self {
            status: ExecStatus::Rows,
            rows: Some(rows),
            truncated: false,
            error_message: None,
            elapsed_ms: 0,
        }
    }

    pub fn db_error(message: impl Into<String>) -> Self {
        Self {
            status: ExecStatus::DbError,
            rows: None,
            truncated: false,
            error_message: Some(message.into()),
            elapsed_ms: 0,
        }
    }

    pub fn timeout() -> Self {
        Self {
            status: ExecStatus::Timeout,
            rows: None,
            truncated: false,
            error_message: None,
            elapsed_ms: 0,
        }
    }

    pub fn is_rows(&self) -> bool {
        self.status == ExecStatus::Rows
    }

    pub fn row_slice(&self) -> &[Vec<SqlValue>] {
        self.rows.as_deref().unwrap_or(&[])
    }

    /// Rows as a sorted multiset of canonical tuples.
    pub fn canonical_rows(&self) -> Vec<Vec<CanonValue>> {
        let mut rows: Vec<Vec<CanonValue>> = self
            .row_slice()
            .iter()
            .map(|r| r.iter().map(SqlValue::canonical).collect())
            .collect();
        rows.sort();
        rows
    }

    /// Key under which outcomes compare equal exactly when
    /// [`results_equal`] holds.
    pub fn comparison_key(&self) -> ComparisonKey {
        match self.status {
            ExecStatus::Rows => ComparisonKey::Rows(self.canonical_rows()),
            status => ComparisonKey::Failure(status, self.error_message.clone().unwrap_or_default()),
        }
    }

    /// Hex digest of the comparison key.
    pub fn signature(&self) -> String {
        let mut text = String::new();
        match self.comparison_key() {
            ComparisonKey::Rows(rows) => {
                text.push_str("rows\n");
                for row in rows {
                    for v in row {
                        v.write_signature(&mut text);
                        text.push('\u{1f}');
                    }
                    text.push('\n');
                }
            }
            ComparisonKey::Failure(status, msg) => {
                let _ = write!(text, "{status:?}\n{msg}");
            }
        }
        sha256_hex(text.as_bytes())
    }

    /// Python-style list of the first `limit` rows in engine order, values
    /// canonicalized as for comparison: `[('Brief Encounter',)]`.
    pub fn preview(&self, limit: usize) -> String {
        match self.status {
            ExecStatus::Rows => {
                let rows: Vec<String> = self
                    .row_slice()
                    .iter()
                    .take(limit)
                    .map(|r| {
                        crate::value::python_tuple(r.iter().map(|v| v.canonical().python_repr()))
                    })
                    .collect();
                format!("[{}]", rows.join(", "))
            }
            ExecStatus::DbError => {
                format!("Error: {}", self.error_message.as_deref().unwrap_or(""))
            }
            ExecStatus::Timeout => "Error: execution timed out".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ComparisonKey {
    Rows(Vec<Vec<CanonValue>>),
    Failure(ExecStatus, String),
}

/// Run `sql` on a read-only connection to `db_file`.
pub fn execute(db_file: &Path, sql: &str, timeout_ms: u64) -> ExecutionOutcome {
    execute_with(db_file, sql, &ExecConfig::with_timeout(timeout_ms))
}

pub fn execute_with(db_file: &Path, sql: &str, cfg: &ExecConfig) -> ExecutionOutcome {
    match open_read_only(db_file) {
        Ok(conn) => execute_on(&conn, sql, cfg),
        Err(e) => ExecutionOutcome::db_error(e.to_string()),
    }
}

/// Run `sql` on an open connection. Write statements are rejected before
/// execution; the timeout is enforced through SQLite's progress handler.
pub fn execute_on(conn: &Connection, sql: &str, cfg: &ExecConfig) -> ExecutionOutcome {
    let start = Instant::now();
    let deadline = start + Duration::from_millis(cfg.timeout_ms);
    let _ = conn.progress_handler(1_000, Some(move || Instant::now() >= deadline));
    let mut outcome = run(conn, sql, cfg.row_cap, deadline);
    let _ = conn.progress_handler(0, None::<fn() -> bool>);
    outcome.elapsed_ms = start.elapsed().as_millis() as u64;
    outcome
}

fn run(conn: &Connection, sql: &str, row_cap: usize, deadline: Instant) -> ExecutionOutcome {
    let failed = |e: rusqlite::Error| {
        let interrupted = matches!(
            e.sqlite_error_code(),
            Some(ErrorCode::OperationInterrupted)
        );
        if interrupted || Instant::now() >= deadline {
            ExecutionOutcome::timeout()
        } else {
            ExecutionOutcome::db_error(e.to_string())
        }
    };
    let trimmed = sql.trim().trim_end_matches(';').trim_end();
    let mut stmt = match conn.prepare(trimmed) {
        Ok(s) => s,
        Err(e) => return failed(e),
    };
    if !stmt.readonly() {
        return ExecutionOutcome::db_error("write statements are not allowed");
    }
    let ncols = stmt.column_count();
    let mut rows = match stmt.query([]) {
        Ok(r) => r,
        Err(e) => return failed(e),
    };
    let mut out = Vec::new();
    let mut truncated = false;
    loop {
        match rows.next() {
            Ok(Some(row)) => {
                if out.len() >= row_cap {
                    truncated = true;
                    break;
                }
                let mut vals = Vec::with_capacity(ncols);
                for i in 0..ncols {
                    match row.get_ref(i) {
                        Ok(v) => vals.push(SqlValue::from(v)),
                        Err(e) => return failed(e),
                    }
                }
                out.push(vals);
            }
            Ok(None) => break,
            Err(e) => return failed(e),
        }
    }
    let mut outcome = ExecutionOutcome::rows(out);
    outcome.truncated = truncated;
    outcome
}

/// Bag equality of row sets after canonicalization. Failures compare equal
/// only to failures with the same status and message; callers scoring
/// accuracy must additionally require `status == Rows`.
pub fn results_equal(a: &ExecutionOutcome, b: &ExecutionOutcome) -> bool {
    match (a.status, b.status) {
        (ExecStatus::Rows, ExecStatus::Rows) => {
            a.row_slice().len() == b.row_slice().len() && a.canonical_rows() == b.canonical_rows()
        }
        (x, y) => x == y && a.error_message == b.error_message,
    }
}

/// Whether `pred` earns execution-accuracy credit against `gold`.
pub fn ex_match(gold: &ExecutionOutcome, pred: &ExecutionOutcome) -> bool {
    gold.is_rows() && pred.is_rows() && results_equal(gold, pred)
}

/// A generated SQL string with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSql {
    pub record_id: String,
    pub sql: String,
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub stage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<ExecutionOutcome>,
}

impl Artifact for CandidateSql {
    const KIND: &'static str = "candidate_sql";
}

impl CandidateSql {
    pub fn new(record_id: impl Into<String>, sql: impl Into<String>) -> Self {
        Self {
            record_id: record_id.into(),
            sql: sql.into(),
            model: String::new(),
            stage: String::new(),
            outcome: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionGroup {
    pub signature: String,
    pub members: Vec<usize>,
    pub representative: usize,
}

/// Partition outcomes under [`results_equal`]. Representatives are the
/// lowest member index; groups are ordered by size (descending), then by
/// representative.
pub fn group_outcomes(outcomes: &[ExecutionOutcome]) -> Vec<ExecutionGroup> {
    let mut by_key: HashMap<ComparisonKey, usize> = HashMap::new();
    let mut groups: Vec<ExecutionGroup> = Vec::new();
    for (i, o) in outcomes.iter().enumerate() {
        let key = o.comparison_key();
        match by_key.get(&key) {
            Some(&g) => groups[g].members.push(i),
            None => {
                by_key.insert(key, groups.len());
                groups.push(ExecutionGroup {
                    signature: o.signature(),
                    members: vec![i],
                    representative: i,
                });
            }
        }
    }
    groups.sort_by(|a, b| {
        b.members
            .len()
            .cmp(&a.members.len())
            .then(a.representative.cmp(&b.representative))
    });
    groups
}

/// Execute every candidate (reusing outcomes already attached) and group them.
pub fn group_by_execution(
    candidates: &mut [CandidateSql],
    db_file: &Path,
    cfg: &ExecConfig,
) -> Vec<ExecutionGroup> {
    let conn = open_read_only(db_file);
    for c in candidates.iter_mut() {
        if c.outcome.is_none() {
            c.outcome = Some(match &conn {
                Ok(conn) => execute_on(conn, &c.sql, cfg),
                Err(e) => ExecutionOutcome::db_error(e.to_string()),
            });
        }
    }
    let outcomes: Vec<ExecutionOutcome> = candidates
        .iter()
        .map(|c| c.outcome.clone().expect("executed above"))
        .collect();
    group_outcomes(&outcomes)
}

/// One gold/prediction pair to score.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub record_id: String,
    pub db_id: String,
    pub difficulty: Difficulty,
    pub gold_sql: String,
    pub pred_sql: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExBucket {
    pub correct: usize,
    pub total: usize,
    pub ex: f64,
}

impl ExBucket {
    fn add(&mut self, hit: bool) {
        self.total += 1;
        if hit {
            self.correct += 1;
        }
        self.ex = self.correct as f64 / self.total as f64;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordScore {
    pub record_id: String,
    pub difficulty: Difficulty,
    pub correct: bool,
    pub pred_status: ExecStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvalidGold {
    pub record_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `simple`, `moderate`, `challenging`, `total` (and `unknown` when
    /// some records carry no difficulty).
    pub breakdown: BTreeMap<String, ExBucket>,
    pub invalid_gold: Vec<InvalidGold>,
    pub records: Vec<RecordScore>,
}

pub const EX_COLUMNS: [&str; 4] = ["simple", "moderate", "challenging", "total"];

impl EvalReport {
    pub fn total(&self) -> &ExBucket {
        &self.breakdown["total"]
    }

    pub fn ex(&self) -> f64 {
        self.total().ex
    }

    /// Fixed-width table with the simple / moderate / challenging / total
    /// columns.
    pub fn render_table(&self) -> String {
        let empty = ExBucket::default();
        let mut out = String::new();
        let _ = write!(out, "{:<8}", "");
        for c in EX_COLUMNS {
            let _ = write!(out, "{c:>13}");
        }
        out.push('\n');
        let _ = write!(out, "{:<8}", "count");
        for c in EX_COLUMNS {
            let _ = write!(out, "{:>13}", self.breakdown.get(c).unwrap_or(&empty).total);
        }
        out.push('\n');
        let _ = write!(out, "{:<8}", "EX");
        for c in EX_COLUMNS {
            let b = self.breakdown.get(c).unwrap_or(&empty);
            let _ = write!(out, "{:>13.2}", b.ex * 100.0);
        }
        out.push('\n');
        out
    }
}

/// Execution Accuracy over `items`. Records whose gold SQL does not return
/// rows are excluded and listed in `invalid_gold`.
pub fn execution_accuracy(
    items: &[EvalItem],
    catalog: &Catalog,
    cfg: &ExecConfig,
    mode: ExecMode,
) -> EvalReport {
    let scored = par::map(mode, items, |item| {
        let db = match catalog.db_path(&item.db_id) {
            Ok(p) => p,
            Err(e) => return Err(e.to_string()),
        };
        let gold = execute_with(&db, &item.gold_sql, cfg);
        if !gold.is_rows() {
            return Err(format!(
                "gold SQL did not execute: {}",
                gold.error_message.as_deref().unwrap_or("timeout")
            ));
        }
        let pred = execute_with(&db, &item.pred_sql, cfg);
        Ok((ex_match(&gold, &pred), pred.status))
    });
    let mut report = EvalReport::default();
    for c in ["simple", "moderate", "challenging", "total"] {
        report.breakdown.insert(c.to_string(), ExBucket::default());
    }
    for (item, res) in items.iter().zip(scored) {
        match res {
            Ok((hit, status)) => {
                report
                    .breakdown
                    .entry(item.difficulty.as_str().to_string())
                    .or_default()
                    .add(hit);
                report.breakdown.get_mut("total").expect("inserted").add(hit);
                report.records.push(RecordScore {
                    record_id: item.record_id.clone(),
                    difficulty: item.difficulty,
                    correct: hit,
                    pred_status: status,
                });
            }
            Err(reason) => {
                log::warn!("{}: excluded from EX: {reason}", item.record_id);
                report.invalid_gold.push(InvalidGold {
                    record_id: item.record_id.clone(),
                    reason,
                });
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support;
    use proptest::prelude::*;

    fn int_rows(v: &[i64]) -> ExecutionOutcome {
        ExecutionOutcome::rows(v.iter().map(|i| vec![SqlValue::Integer(*i)]).collect())
    }

    #[test]
    fn counts_fixture_rows() {
        let dir = tempfile::tempdir().unwrap();
        let db = test_support::build_db(dir.path(), "school");
        let out = execute(&db, "SELECT count(*) FROM schools", 1000);
        assert_eq!(out.rows, Some(vec![vec![SqlValue::Integer(3)]]));
    }

    #[test]
    fn missing_table_is_db_error() {
        let dir = tempfile::tempdir().unwrap();
        let db = test_support::build_db(dir.path(), "school");
        let out = execute(&db, "SELECT * FROM nope", 1000);
        assert_eq!(out.status, ExecStatus::DbError);
        assert!(out.error_message.unwrap().contains("no such table"));
    }

    #[test]
    fn runaway_query_times_out() {
        let dir = tempfile::tempdir().unwrap();
        let db = test_support::build_db(dir.path(), "school");
        let sql = "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM c) SELECT max(x) FROM c";
        let out = execute(&db, sql, 100);
        assert_eq!(out.status, ExecStatus::Timeout);
        assert!(out.elapsed_ms < 5_000);
    }

    #[test]
    fn writes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let db = test_support::build_db(dir.path(), "school");
        let out = execute(&db, "DELETE FROM schools", 1000);
        assert_eq!(out.status, ExecStatus::DbError);
        let count = execute(&db, "SELECT count(*) FROM schools", 1000);
        assert_eq!(count.rows.unwrap()[0][0], SqlValue::Integer(3));
    }

    #[test]
    fn row_cap_truncates() {
        let dir = tempfile::tempdir().unwrap();
        let db = test_support::build_db(dir.path(), "concert");
        let cfg = ExecConfig {
            timeout_ms: 1000,
            row_cap: 4,
        };
        let out = execute_with(&db, "SELECT name FROM singer", &cfg);
        assert_eq!(out.row_slice().len(), 4);
        assert!(out.truncated);
    }

    #[test]
    fn bag_comparison() {
        assert!(results_equal(&int_rows(&[1, 2]), &int_rows(&[2, 1])));
        assert!(!results_equal(&int_rows(&[1]), &int_rows(&[1, 1])));
        let a = ExecutionOutcome::rows(vec![vec![SqlValue::Real(0.656074766)]]);
        let b = ExecutionOutcome::rows(vec![vec![SqlValue::Real(0.6560747660000001)]]);
        assert!(results_equal(&a, &b));
        let c = ExecutionOutcome::rows(vec![vec![SqlValue::Real(3.0)]]);
        assert!(results_equal(&c, &int_rows(&[3])));
        let n1 = ExecutionOutcome::rows(vec![vec![SqlValue::Null]]);
        assert!(results_equal(&n1, &n1.clone()));
        let t = ExecutionOutcome::rows(vec![vec![SqlValue::Text("3".into())]]);
        assert!(!results_equal(&t, &int_rows(&[3])));
    }

    #[test]
    fn failures_compare_by_message() {
        let e1 = ExecutionOutcome::db_error("no such table: x");
        assert!(results_equal(&e1, &e1.clone()));
        assert!(!results_equal(&e1, &ExecutionOutcome::db_error("other")));
        assert!(!results_equal(&e1, &int_rows(&[])));
        assert!(!ex_match(&e1, &e1));
    }

    #[test]
    fn groups_four_candidates() {
        let dir = tempfile::tempdir().unwrap();
        let db = test_support::build_db(dir.path(), "concert");
        let mut cands: Vec<CandidateSql> = [
            "SELECT name FROM singer WHERE country = 'France'",
            "SELECT name FROM singer WHERE country = 'US'",
            "SELECT name FROM singer WHERE country = 'France' ORDER BY age",
            "SELECT name FROM singer WHERE age > 40",
        ]
        .iter()
        .map(|s| CandidateSql::new("r", *s))
        .collect();
        let groups = group_by_execution(&mut cands, &db, &ExecConfig::default());
        assert_eq!(groups.len(), 3);
        assert_eq!(groups[0].members, vec![0, 2]);
        assert_eq!(groups[1].representative, 1);
        assert_eq!(groups[2].representative, 3);

        let mut one = vec![CandidateSql::new("r", "SELECT 1")];
        let g = group_by_execution(&mut one, &db, &ExecConfig::default());
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].representative, 0);

        let mut errs: Vec<_> = (0..3)
            .map(|i| CandidateSql::new("r", format!("SELECT {i} FROM missing_table")))
            .collect();
        assert_eq!(group_by_execution(&mut errs, &db, &ExecConfig::default()).len(), 1);
    }

    #[test]
    fn preview_matches_python_repr() {
        let o = ExecutionOutcome::rows(vec![
            vec![SqlValue::Text("Brief Encounter".into())],
        ]);
        assert_eq!(o.preview(10), "[('Brief Encounter',)]");
        let o = ExecutionOutcome::rows(vec![
            vec![SqlValue::Integer(1), SqlValue::Real(2.5), SqlValue::Null],
        ]);
        assert_eq!(o.preview(10), "[(1, 2.5, None)]");
    }

    fn arb_value() -> impl Strategy<Value = SqlValue> {
        prop_oneof![
            Just(SqlValue::Null),
            (0i64..4).prop_map(SqlValue::Integer),
            (0i64..4).prop_map(|i| SqlValue::Real(i as f64)),
            Just(SqlValue::Real(0.1 + 0.2)),
            Just(SqlValue::Real(0.3)),
            prop::sample::select(vec!["a", "b", "1"]).prop_map(|s| SqlValue::Text(s.into())),
        ]
    }

    fn arb_outcome() -> impl Strategy<Value = ExecutionOutcome> {
        prop_oneof![
            4 => prop::collection::vec(prop::collection::vec(arb_value(), 1..3), 0..4)
                .prop_map(ExecutionOutcome::rows),
            1 => prop::sample::select(vec!["x", "y"]).prop_map(ExecutionOutcome::db_error),
            1 => Just(ExecutionOutcome::timeout()),
        ]
    }

    proptest! {
        #[test]
        fn equality_is_an_equivalence(a in arb_outcome(), b in arb_outcome(), c in arb_outcome()) {
            prop_assert!(results_equal(&a, &a));
            prop_assert_eq!(results_equal(&a, &b), results_equal(&b, &a));
            if results_equal(&a, &b) && results_equal(&b, &c) {
                prop_assert!(results_equal(&a, &c));
            }
            prop_assert_eq!(results_equal(&a, &b), a.signature() == b.signature());
        }

        #[test]
        fn grouping_partitions(outs in prop::collection::vec(arb_outcome(), 1..12)) {
            let groups = group_outcomes(&outs);
            let mut seen = vec![0; outs.len()];
            for g in &groups {
                prop_assert!(g.members.contains(&g.representative));
                prop_assert_eq!(g.representative, *g.members.iter().min().unwrap());
                for &m in &g.members {
                    seen[m] += 1;
                    prop_assert!(results_equal(&outs[m], &outs[g.representative]));
                }
            }
            prop_assert!(seen.iter().all(|&n| n == 1));
            for w in groups.windows(2) {
                prop_assert!(!results_equal(&outs[w[0].representative], &outs[w[1].representative]));
                prop_assert!(w[0].members.len() >= w[1].members.len());
            }
        }
    }
}

//! Error collection, synthesis (SQL to question, question to SQL), query and
//! example diffusion, and active-learning training-set assembly.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{sha256_hex, Artifact};
use crate::catalog::{serialize_schema, CatalogError, SchemaGraph};
use crate::dataset::{join_predictions, CoverageError, DatasetSplit, ModelHandle, PredictionFile, QuestionRecord};
use crate::exec::{ex_match, execute_with, ExecConfig, ExecStatus, InvalidGold};
use crate::judge::template;
use crate::linking::LinkResult;
use crate::par::{self, ExecMode};
use crate::sql::{extract_sql_from_response, extract_tables, extract_tables_lenient, normalize_sql, syntax_check};
use crate::verify::{Check, QueryPair, VerdictBundle, Verifier, VerifyError, VerifyMode};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("generator `{model}` failed: {message}")]
    Generator { model: String, message: String },
    #[error(transparent)]
    Coverage(#[from] CoverageError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

/// A record the current model got wrong.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub record: QuestionRecord,
    pub predicted_sql: String,
    pub pred_status: ExecStatus,
    pub iteration: u32,
}

impl Artifact for ErrorRecord {
    const KIND: &'static str = "error_record";
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorSet {
    pub iteration: u32,
    pub records: Vec<ErrorRecord>,
    /// Records whose gold SQL did not execute.
    pub excluded: Vec<InvalidGold>,
}

/// Records whose prediction does not match gold by execution.
pub fn collect_errors(
    split: &DatasetSplit,
    preds: &PredictionFile,
    catalog: &crate::catalog::Catalog,
    exec: &ExecConfig,
    mode: ExecMode,
    iteration: u32,
) -> Result<ErrorSet, AugmentError> {
    let joined = join_predictions(split, preds)?;
    let judged = par::map(mode, &joined.pairs, |(record, pred)| {
        let db = catalog.db_path(&record.db_id).map_err(|e| e.to_string())?;
        let gold = execute_with(&db, &record.gold_sql, exec);
        if !gold.is_rows() {
            return Err(format!(
                "gold SQL did not execute: {}",
                gold.error_message.as_deref().unwrap_or("timeout")
            ));
        }
        let out = execute_with(&db, pred, exec);
        Ok((ex_match(&gold, &out), out.status))
    });
    let mut set = ErrorSet {
        iteration,
        ..ErrorSet::default()
    };
    for ((record, pred), res) in joined.pairs.iter().zip(judged) {
        match res {
            Ok((true, _)) => {}
            Ok((false, status)) => set.records.push(ErrorRecord {
                record: (*record).clone(),
                predicted_sql: pred.clone(),
                pred_status: status,
                iteration,
            }),
            Err(reason) => set.excluded.push(InvalidGold {
                record_id: record.record_id.clone(),
                reason,
            }),
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    QueryDiffusion,
    ExampleDiffusion,
    Sql2query,
    Query2sql,
}

impl AugmentKind {
    pub fn verify_mode(self) -> VerifyMode {
        match self {
            AugmentKind::QueryDiffusion => VerifyMode::QueryDiffusion,
            AugmentKind::ExampleDiffusion => VerifyMode::ExampleDiffusion,
            AugmentKind::Sql2query | AugmentKind::Query2sql => VerifyMode::Synthesis,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AugmentKind::QueryDiffusion => "query_diffusion",
            AugmentKind::ExampleDiffusion => "example_diffusion",
            AugmentKind::Sql2query => "sql2query",
            AugmentKind::Query2sql => "query2sql",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedPair {
    pub pair_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_record_id: Option<String>,
    pub augment_kind: AugmentKind,
    pub query: String,
    #[serde(default)]
    pub evidence: String,
    pub sql: String,
    pub db_id: String,
    pub generator: String,
    pub verdict: VerdictBundle,
}

impl Artifact for AugmentedPair {
    const KIND: &'static str = "augmented_pair";
}

impl AugmentedPair {
    pub fn accepted(&self) -> bool {
        self.verdict.accepted()
    }
}

fn strip_list_marker(line: &str) -> &str {
    let s = line.trim().trim_start_matches(['-', '*', '•']).trim_start();
    let digits = s.chars().take_while(char::is_ascii_digit).count();
    let s = if digits > 0 && s[digits..].starts_with(['.', ')']) {
        &s[digits + 1..]
    } else {
        s
    };
    s.trim().trim_matches('"').trim()
}

/// One paraphrase per non-empty line, numbering removed, duplicates dropped.
pub fn parse_rewrites(response: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    response
        .lines()
        .map(strip_list_marker)
        .filter(|l| !l.is_empty() && !l.starts_with("###") && !l.starts_with("```"))
        .filter(|l| seen.insert(l.to_lowercase()))
        .map(str::to_string)
        .collect()
}

fn strip_label<'a>(line: &'a str, label: &str) -> Option<&'a str> {
    let l = strip_list_marker(line);
    let l = l.trim_start_matches("**");
    if l.len() >= label.len() && l[..label.len()].eq_ignore_ascii_case(label) {
        Some(l[label.len()..].trim_start_matches("**").trim())
    } else {
        None
    }
}

/// `Question: ... / SQL: ...` blocks; SQL may span several lines.
pub fn parse_question_sql_blocks(response: &str) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut question: Option<String> = None;
    let mut sql: Option<String> = None;
    let flush = |q: &mut Option<String>, s: &mut Option<String>, out: &mut Vec<(String, String)>| {
        if let (Some(q), Some(s)) = (q.take(), s.take()) {
            let s = extract_sql_from_response(&s);
            if !q.is_empty() && !s.is_empty() {
                out.push((q, s));
            }
        }
    };
    for line in response.lines() {
        if let Some(q) = strip_label(line, "question:") {
            flush(&mut question, &mut sql, &mut out);
            question = Some(q.to_string());
        } else if let Some(s) = strip_label(line, "sql:") {
            sql = Some(s.to_string());
        } else if let Some(s) = sql.as_mut() {
            s.push('\n');
            s.push_str(line);
        }
    }
    flush(&mut question, &mut sql, &mut out);
    out
}

/// First non-empty line, with a leading `Question:` label removed.
pub fn parse_summary(response: &str) -> Option<String> {
    let line = response.lines().map(str::trim).find(|l| !l.is_empty() && !l.starts_with("###"))?;
    let line = strip_label(line, "question:").unwrap_or(line);
    let line = line.trim_matches('"').trim();
    (!line.is_empty()).then(|| line.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Paraphrases per error record.
    pub k: usize,
    /// Pairs requested per database for question-to-SQL synthesis.
    pub query2sql_k: usize,
    pub iteration_cap: u32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            k: 3,
            query2sql_k: 3,
            iteration_cap: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Query,
    Example,
    Sql2query,
    Query2sql,
    /// Query and example diffusion from every generator, concatenated.
    Hyb,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "query" => Ok(Strategy::Query),
            "example" => Ok(Strategy::Example),
            "sql2query" => Ok(Strategy::Sql2query),
            "query2sql" => Ok(Strategy::Query2sql),
            "hyb" => Ok(Strategy::Hyb),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

/// Generated pairs plus everything that went wrong along the way.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentBatch {
    pub pairs: Vec<AugmentedPair>,
    pub warnings: Vec<String>,
}

impl AugmentBatch {
    pub fn accepted(&self) -> impl Iterator<Item = &AugmentedPair> {
        self.pairs.iter().filter(|p| p.accepted())
    }

    fn extend(&mut self, other: AugmentBatch) {
        self.pairs.extend(other.pairs);
        self.warnings.extend(other.warnings);
    }
}

pub struct Augmenter<'a> {
    pub verifier: &'a Verifier<'a>,
    pub generator: &'a ModelHandle,
}

impl Augmenter<'_> {
    fn generate(&self, template_id: &str, bindings: &[(&str, &str)]) -> Result<String, AugmentError> {
        self.verifier
            .client
            .ask(self.generator, template_id, bindings)
            .map_err(|e| AugmentError::Generator {
                model: self.generator.name.clone(),
                message: e.to_string(),
            })
    }

    fn full_schema(&self, db_id: &str) -> Result<String, AugmentError> {
        let graph = self.verifier.catalog.graph(db_id)?;
        Ok(serialize_schema(&graph, None, None).expect("full schema always renders"))
    }

    fn finish(&self, pair: QueryPair, kind: AugmentKind, source: Option<&str>, evidence: &str) -> Result<AugmentedPair, AugmentError> {
        let verdict = self.verifier.verify_pair(&pair, kind.verify_mode())?;
        Ok(AugmentedPair {
            pair_id: pair.pair_id,
            source_record_id: source.map(str::to_string),
            augment_kind: kind,
            query: pair.query,
            evidence: evidence.to_string(),
            sql: pair.sql,
            db_id: pair.db_id,
            generator: self.generator.name.clone(),
            verdict,
        })
    }

    /// Paraphrases of the question, each paired with the original SQL. Only
    /// accepted pairs are returned; generator failures become warnings.
    pub fn query_diffusion(&self, record: &QuestionRecord, k: usize) -> Result<AugmentBatch, AugmentError> {
        let mut batch = AugmentBatch::default();
        if k == 0 {
            return Ok(batch);
        }
        let schema = self.full_schema(&record.db_id)?;
        let k_text = k.to_string();
        let response = match self.generate(
            template::QUERY_DIFFUSION,
            &[
                ("k", &k_text),
                ("question", &record.question),
                ("SQL", &record.gold_sql),
                ("table_info", &schema),
            ],
        ) {
            Ok(r) => r,
            Err(e) => {
                batch.warnings.push(format!("{}: {e}", record.record_id));
                return Ok(batch);
            }
        };
        for (i, text) in parse_rewrites(&response).into_iter().take(k).enumerate() {
            let pair = QueryPair {
                pair_id: format!("{}:qd:{}:{i}", record.record_id, self.generator.name),
                db_id: record.db_id.clone(),
                query: text,
                sql: record.gold_sql.clone(),
                original_query: Some(record.question.clone()),
                schema_text: Some(schema.clone()),
            };
            let p = self.finish(pair, AugmentKind::QueryDiffusion, Some(&record.record_id), &record.evidence)?;
            if p.accepted() {
                batch.pairs.push(p);
            }
        }
        Ok(batch)
    }

    /// Rewrite the record onto `target_db`. The returned pair carries its
    /// verdict; pairs reading tables outside the target are rejected
    /// without consulting any judge.
    pub fn example_diffusion(&self, record: &QuestionRecord, target_db: &SchemaGraph) -> Result<AugmentedPair, AugmentError> {
        if target_db.db_id == record.db_id {
            return Err(AugmentError::Input(format!(
                "{}: example diffusion target must differ from the source database",
                record.record_id
            )));
        }
        let schema = serialize_schema(target_db, None, None).expect("full schema always renders");
        let response = self.generate(
            template::EXAMPLE_DIFFUSION,
            &[("question", &record.question), ("SQL", &record.gold_sql), ("table_info", &schema)],
        )?;
        let (query, sql) = parse_question_sql_blocks(&response)
            .into_iter()
            .next()
            .ok_or_else(|| AugmentError::Generator {
                model: self.generator.name.clone(),
                message: "no `Question:` / `SQL:` block in response".into(),
            })?;
        let pair = QueryPair {
            pair_id: format!("{}:ed:{}:{}", record.record_id, self.generator.name, target_db.db_id),
            db_id: target_db.db_id.clone(),
            query,
            sql,
            original_query: None,
            schema_text: Some(schema),
        };
        let known = target_db.table_names();
        let unknown: Vec<String> = extract_tables_lenient(&pair.sql)
            .names
            .into_iter()
            .filter(|t| !known.contains(t))
            .collect();
        if !unknown.is_empty() {
            let mut verdict = VerdictBundle::new(&pair.pair_id, VerifyMode::ExampleDiffusion);
            verdict.checks_run.push(Check::SqlCheck);
            verdict.sql_legal = Some(false);
            verdict.sql_diagnostic = Some(format!("tables not in `{}`: {}", target_db.db_id, unknown.join(", ")));
            verdict.finalize();
            return Ok(AugmentedPair {
                pair_id: pair.pair_id,
                source_record_id: Some(record.record_id.clone()),
                augment_kind: AugmentKind::ExampleDiffusion,
                query: pair.query,
                evidence: String::new(),
                sql: pair.sql,
                db_id: pair.db_id,
                generator: self.generator.name.clone(),
                verdict,
            });
        }
        self.finish(pair, AugmentKind::ExampleDiffusion, Some(&record.record_id), "")
    }

    /// Interpret the SQL, then summarize it into a one-sentence question.
    pub fn sql2query(&self, pair_id: &str, sql: &str, db: &SchemaGraph, source: Option<&str>) -> Result<AugmentedPair, AugmentError> {
        let verdict = syntax_check(sql);
        if !verdict.ok {
            return Err(AugmentError::Input(format!("{pair_id}: SQL does not parse: {}", verdict.error_message)));
        }
        let tables = extract_tables(sql).map_err(|e| AugmentError::Input(e.to_string()))?;
        let sel = db.selection_for_tables(tables.names.iter().map(String::as_str));
        let schema = serialize_schema(db, Some(&sel), None).expect("selection drawn from graph");
        let interpretation = self.generate(template::SQL_INTERPRET, &[("SQL", sql), ("table_info", &schema)])?;
        let summary = self.generate(
            template::SQL_SUMMARIZE,
            &[("SQL", sql), ("table_info", &schema), ("interpretation", &interpretation)],
        )?;
        let query = parse_summary(&summary).ok_or_else(|| AugmentError::Generator {
            model: self.generator.name.clone(),
            message: "empty summary".into(),
        })?;
        let pair = QueryPair {
            pair_id: pair_id.to_string(),
            db_id: db.db_id.clone(),
            query,
            sql: sql.to_string(),
            original_query: None,
            schema_text: Some(schema),
        };
        self.finish(pair, AugmentKind::Sql2query, source, "")
    }

    /// `k` fresh question-SQL pairs for `db`; only accepted pairs returned.
    pub fn query2sql(&self, db: &SchemaGraph, k: usize) -> Result<AugmentBatch, AugmentError> {
        if k == 0 {
            return Err(AugmentError::Input("query2sql needs k >= 1".into()));
        }
        if db.tables.is_empty() {
            return Err(AugmentError::Input(format!("database `{}` has no tables", db.db_id)));
        }
        let mut batch = AugmentBatch::default();
        let schema = serialize_schema(db, None, None).expect("full schema always renders");
        let k_text = k.to_string();
        let response = match self.generate(template::QUERY2SQL, &[("k", &k_text), ("table_info", &schema)]) {
            Ok(r) => r,
            Err(e) => {
                batch.warnings.push(format!("{}: {e}", db.db_id));
                return Ok(batch);
            }
        };
        for (i, (query, sql)) in parse_question_sql_blocks(&response).into_iter().take(k).enumerate() {
            let pair = QueryPair {
                pair_id: format!("{}:q2s:{}:{i}", db.db_id, self.generator.name),
                db_id: db.db_id.clone(),
                query,
                sql,
                original_query: None,
                schema_text: Some(schema.clone()),
            };
            let p = self.finish(pair, AugmentKind::Query2sql, None, "")?;
            if p.accepted() {
                batch.pairs.push(p);
            }
        }
        Ok(batch)
    }

    /// Run one strategy over an error set. Example-diffusion targets rotate
    /// over the other databases in catalog order.
    pub fn run(&self, errors: &ErrorSet, strategy: Strategy, cfg: &AugmentConfig, mode: ExecMode) -> Result<AugmentBatch, AugmentError> {
        let records: Vec<&QuestionRecord> = errors.records.iter().map(|e| &e.record).collect();
        let mut out = AugmentBatch::default();
        match strategy {
            Strategy::Query | Strategy::Hyb => {
                for b in par::try_map(mode, &records, |r| self.query_diffusion(r, cfg.k))? {
                    out.extend(b);
                }
            }
            _ => {}
        }
        match strategy {
            Strategy::Example | Strategy::Hyb => {
                let db_ids = self.verifier.catalog.db_ids();
                let indexed: Vec<(usize, &QuestionRecord)> = records.iter().copied().enumerate().collect();
                let results = par::map(mode, &indexed, |(i, r)| -> Result<Option<AugmentedPair>, AugmentError> {
                    let others: Vec<&String> = db_ids.iter().filter(|d| **d != r.db_id).collect();
                    let Some(target) = others.get(i % others.len().max(1)) else {
                        return Ok(None);
                    };
                    let graph = self.verifier.catalog.graph(target)?;
                    self.example_diffusion(r, &graph).map(Some)
                });
                for (res, r) in results.into_iter().zip(&records) {
                    match res {
                        Ok(Some(p)) if p.accepted() => out.pairs.push(p),
                        Ok(_) => {}
                        Err(AugmentError::Generator { model, message }) => {
                            out.warnings.push(format!("{}: generator `{model}` failed: {message}", r.record_id))
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
            _ => {}
        }
        if strategy == Strategy::Sql2query {
            let results = par::map(mode, &records, |r| -> Result<AugmentedPair, AugmentError> {
                let graph = self.verifier.catalog.graph(&r.db_id)?;
                let id = format!("{}:s2q:{}", r.record_id, self.generator.name);
                self.sql2query(&id, &r.gold_sql, &graph, Some(&r.record_id))
            });
            for (res, r) in results.into_iter().zip(&records) {
                match res {
                    Ok(p) if p.accepted() => out.pairs.push(p),
                    Ok(_) => {}
                    Err(e @ (AugmentError::Generator { .. } | AugmentError::Input(_))) => {
                        out.warnings.push(format!("{}: {e}", r.record_id))
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        if strategy == Strategy::Query2sql {
            let dbs: BTreeSet<&str> = records.iter().map(|r| r.db_id.as_str()).collect();
            let dbs: Vec<&str> = dbs.into_iter().collect();
            for b in par::try_map(mode, &dbs, |db| {
                let graph = self.verifier.catalog.graph(db)?;
                self.query2sql(&graph, cfg.query2sql_k)
            })? {
                out.extend(b);
            }
        }
        Ok(out)
    }
}

pub const SFT_INSTRUCTION: &str =
    "Given the database schema and the question below, write a SQLite query that answers the question.";

/// One instruction-tuning example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

impl Artifact for SftExample {
    const KIND: &'static str = "sft_example";
}

pub fn sft_input(schema_text: &str, question: &str) -> String {
    format!("### Database schema:\n{schema_text}\n\n### Question:\n{question}")
}

/// Per-origin example counts, one row per source like a data-count table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SftStats {
    pub iteration: u32,
    pub originals: usize,
    pub per_kind: BTreeMap<String, usize>,
    pub per_generator: BTreeMap<String, usize>,
    pub duplicates_dropped: usize,
    pub total: usize,
}

impl SftStats {
    pub fn render_table(&self) -> String {
        let step = match self.iteration {
            0 | 1 => "first-step".to_string(),
            2 => "second-step".to_string(),
            n => format!("step-{n}"),
        };
        let mut out = format!("{:<24} {}\n", "data", step);
        out.push_str(&format!("{:<24} {}\n", "original", self.originals));
        for (k, n) in &self.per_kind {
            out.push_str(&format!("{k:<24} {n}\n"));
        }
        out.push_str(&format!("{:<24} {}", "total", self.total));
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SftFile {
    pub examples: Vec<SftExample>,
    pub stats: SftStats,
}

fn question_key(q: &str) -> String {
    q.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

struct SchemaCache<'a> {
    catalog: &'a crate::catalog::Catalog,
    cache: BTreeMap<String, String>,
}

impl SchemaCache<'_> {
    fn full(&mut self, db_id: &str) -> Result<String, AugmentError> {
        if let Some(s) = self.cache.get(db_id) {
            return Ok(s.clone());
        }
        let graph = self.catalog.graph(db_id)?;
        let s = serialize_schema(&graph, None, None).expect("full schema always renders");
        self.cache.insert(db_id.to_string(), s.clone());
        Ok(s)
    }

    /// Schema restricted to the record's linking selection when there is one.
    fn linked(
        &mut self,
        links: &BTreeMap<String, LinkResult>,
        record_id: Option<&str>,
        db_id: &str,
    ) -> Result<String, AugmentError> {
        if let Some(link) = record_id.and_then(|id| links.get(id)) {
            if link.db_id == db_id {
                let graph = self.catalog.graph(db_id)?;
                if let Ok(s) = serialize_schema(&graph, Some(&link.selected), None) {
                    return Ok(s);
                }
            }
        }
        self.full(db_id)
    }
}

/// Originals followed by accepted pairs (sorted by kind, then pair id),
/// deduplicated on (question, normalized SQL, database).
pub fn build_active_learning_set(
    original: &DatasetSplit,
    accepted: &[AugmentedPair],
    link_results: &BTreeMap<String, LinkResult>,
    catalog: &crate::catalog::Catalog,
    iteration: u32,
) -> Result<SftFile, AugmentError> {
    if let Some(p) = accepted.iter().find(|p| !p.accepted()) {
        return Err(AugmentError::Input(format!("pair `{}` was not accepted by verification", p.pair_id)));
    }
    let mut schemas = SchemaCache {
        catalog,
        cache: BTreeMap::new(),
    };
    let mut stats = SftStats {
        iteration,
        ..SftStats::default()
    };
    let mut seen = BTreeSet::new();
    let mut examples = Vec::new();
    let mut push = |question: &str, sql: &str, db_id: &str, schema: String, examples: &mut Vec<SftExample>| -> bool {
        let key = (question_key(question), normalize_sql(sql), db_id.to_string());
        if !seen.insert(key) {
            return false;
        }
        examples.push(SftExample {
            instruction: SFT_INSTRUCTION.to_string(),
            input: sft_input(&schema, question),
            output: sql.to_string(),
        });
        true
    };
    for r in &original.records {
        let schema = schemas.linked(link_results, Some(&r.record_id), &r.db_id)?;
        if push(&r.question_with_evidence(), &r.gold_sql, &r.db_id, schema, &mut examples) {
            stats.originals += 1;
        } else {
            stats.duplicates_dropped += 1;
        }
    }
    let mut sorted: Vec<&AugmentedPair> = accepted.iter().collect();
    sorted.sort_by(|a, b| (a.augment_kind, &a.pair_id, &a.generator).cmp(&(b.augment_kind, &b.pair_id, &b.generator)));
    for p in sorted {
        let schema = match p.augment_kind {
            AugmentKind::QueryDiffusion => schemas.linked(link_results, p.source_record_id.as_deref(), &p.db_id)?,
            _ => schemas.full(&p.db_id)?,
        };
        let question = crate::dataset::join_evidence(&p.evidence, &p.query);
        if push(&question, &p.sql, &p.db_id, schema, &mut examples) {
            *stats.per_kind.entry(p.augment_kind.as_str().to_string()).or_default() += 1;
            *stats.per_generator.entry(p.generator.clone()).or_default() += 1;
        } else {
            stats.duplicates_dropped += 1;
        }
    }
    stats.total = examples.len();
    Ok(SftFile { examples, stats })
}

/// Content hash of an SFT file, for determinism checks.
pub fn sft_hash(file: &SftFile) -> String {
    let body = serde_json::to_vec(&file.examples).expect("examples serialize");
    sha256_hex(&body)
}

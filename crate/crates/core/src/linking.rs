//! Schema linking: value match, first filter, keyword extraction and second
//! filter.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::artifact::Artifact;
use crate::catalog::{render_matched_block, serialize_schema, MatchedValue, SchemaGraph, Selection, ValueIndex};
use crate::dataset::{join_evidence, ModelHandle, QuestionRecord};
use crate::judge::{template, JudgeClient};
use crate::text::{distinct_tokens, lcs_chars, tokenize, Bm25Corpus, Bm25Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkConfig {
    pub top_n_tables: usize,
    pub top_n_columns_per_table: usize,
    pub bm25_k1: f64,
    pub bm25_b: f64,
    pub min_substring_len: usize,
    pub max_matched_values: usize,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            top_n_tables: 6,
            top_n_columns_per_table: 10,
            bm25_k1: 1.2,
            bm25_b: 0.75,
            min_substring_len: 4,
            max_matched_values: 20,
        }
    }
}

impl LinkConfig {
    pub fn validate(&self) -> Result<(), LinkError> {
        let bad = |m: &str| Err(LinkError::Config(m.to_string()));
        if self.top_n_tables == 0 || self.top_n_columns_per_table == 0 || self.max_matched_values == 0 {
            return bad("counts must be at least 1");
        }
        if self.min_substring_len == 0 {
            return bad("min_substring_len must be at least 1");
        }
        if !(self.bm25_k1 > 0.0) {
            return bad("bm25_k1 must be positive");
        }
        if !(0.0..=1.0).contains(&self.bm25_b) {
            return bad("bm25_b must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn bm25(&self) -> Bm25Params {
        Bm25Params {
            k1: self.bm25_k1,
            b: self.bm25_b,
        }
    }
}

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("invalid link config: {0}")]
    Config(String),
    #[error("relevance scorer `{scorer}` failed: {message}")]
    Scorer { scorer: String, message: String },
    #[error("keyword extraction failed: {0}")]
    Keywords(String),
    #[error("second filter needs a non-empty first pass")]
    EmptyFirstPass,
    #[error("schema rendering failed: {0}")]
    Render(String),
}

fn by_score_then_key(a: &MatchedValue, b: &MatchedValue) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| (&a.table, &a.column, &a.value).cmp(&(&b.table, &b.column, &b.value)))
}

/// Cells related to the question: BM25 hits (score > 0) and cells sharing a
/// common substring of at least `min_substring_len` chars, sorted by score
/// then (table, column, value), truncated to `max_matched_values`.
pub fn value_match(question: &str, index: &ValueIndex, cfg: &LinkConfig) -> Vec<MatchedValue> {
    if question.trim().is_empty() {
        return vec![];
    }
    let terms = distinct_tokens(question);
    let scores = index.bm25_scores(&terms, &cfg.bm25());
    let q_chars: Vec<char> = question.chars().flat_map(char::to_lowercase).collect();
    let mut out: Vec<MatchedValue> = index
        .cells
        .iter()
        .enumerate()
        .filter_map(|(i, cell)| {
            let score = scores.get(&(i as u32)).copied().unwrap_or(0.0);
            let v_chars: Vec<char> = cell.value.chars().flat_map(char::to_lowercase).collect();
            let sub = lcs_chars(&q_chars, &v_chars);
            (score > 0.0 || sub >= cfg.min_substring_len).then(|| MatchedValue {
                table: cell.table.clone(),
                column: cell.column.clone(),
                value: cell.value.clone(),
                score,
                substring_len: sub,
            })
        })
        .collect();
    out.sort_by(by_score_then_key);
    out.truncate(cfg.max_matched_values);
    out
}

/// Relevance scores for every table and column of a graph.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SchemaScores {
    pub tables: BTreeMap<String, f64>,
    /// Keyed by table, then column.
    pub columns: BTreeMap<String, BTreeMap<String, f64>>,
}

/// Scores tables and columns for a question (stands in for a trained
/// classifier).
pub trait RelevanceScorer: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, question: &str, graph: &SchemaGraph) -> Result<SchemaScores, String>;
}

/// BM25 over one document per column: table name, column name and comment
/// tokens. A table scores as its best column.
#[derive(Debug, Clone, Default)]
pub struct LexicalScorer {
    pub params: Bm25Params,
}

pub fn column_document(table: &str, column: &str, comment: &str) -> Vec<String> {
    let mut tokens = tokenize(table);
    tokens.extend(tokenize(column));
    tokens.extend(tokenize(comment));
    tokens
}

impl RelevanceScorer for LexicalScorer {
    fn name(&self) -> &str {
        "lexical"
    }

    fn score(&self, question: &str, graph: &SchemaGraph) -> Result<SchemaScores, String> {
        let mut corpus = Bm25Corpus::new();
        let mut ids = Vec::new();
        for t in &graph.tables {
            for c in &t.columns {
                ids.push((t.name.as_str(), c.name.as_str()));
                corpus.add(&column_document(&t.name, &c.name, &c.comment));
            }
        }
        let terms = distinct_tokens(question);
        let mut scores = SchemaScores::default();
        for t in &graph.tables {
            scores.tables.insert(t.name.clone(), 0.0);
            scores.columns.insert(t.name.clone(), BTreeMap::new());
        }
        for (doc, (t, c)) in ids.into_iter().enumerate() {
            let s = corpus.score(doc, &terms, &self.params);
            scores.columns.get_mut(t).expect("table inserted").insert(c.to_string(), s);
            let best = scores.tables.get_mut(t).expect("table inserted");
            *best = best.max(s);
        }
        Ok(scores)
    }
}

/// Remote scorer: POSTs `{"question", "schema"}` and expects
/// `{"tables": {t: s}, "columns": {"t.c": s}}`.
#[derive(Debug, Clone)]
pub struct HttpScorer {
    pub url: String,
    pub timeout: Duration,
}

impl RelevanceScorer for HttpScorer {
    fn name(&self) -> &str {
        &self.url
    }

    fn score(&self, question: &str, graph: &SchemaGraph) -> Result<SchemaScores, String> {
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).build();
        let resp: Value = agent
            .post(&self.url)
            .send_json(json!({"question": question, "schema": graph}))
            .map_err(|e| e.to_string())?
            .into_json()
            .map_err(|e| e.to_string())?;
        let mut scores = SchemaScores::default();
        for t in &graph.tables {
            let ts = resp
                .pointer(&format!("/tables/{}", t.name.replace('~', "~0").replace('/', "~1")))
                .and_then(Value::as_f64)
                .unwrap_or(0.0);
            scores.tables.insert(t.name.clone(), ts);
            let cols = scores.columns.entry(t.name.clone()).or_default();
            for c in &t.columns {
                let key = format!("{}.{}", t.name, c.name);
                let cs = resp
                    .get("columns")
                    .and_then(|m| m.get(&key))
                    .and_then(Value::as_f64)
                    .unwrap_or(0.0);
                cols.insert(c.name.clone(), cs);
            }
        }
        Ok(scores)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedColumn {
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedTable {
    pub name: String,
    pub score: f64,
    pub columns: Vec<RankedColumn>,
}

/// First-filter output: kept tables in rank order, each with kept columns
/// in rank order (key columns appended after the top-N).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedSelection {
    pub tables: Vec<RankedTable>,
}

impl RankedSelection {
    pub fn to_selection(&self) -> Selection {
        let mut sel = Selection::default();
        for t in &self.tables {
            sel.tables.entry(t.name.clone()).or_default();
            for c in &t.columns {
                sel.insert(&t.name, &c.name);
            }
        }
        sel
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }
}

fn desc_then_name(a: (&str, f64), b: (&str, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(b.0))
}

/// Primary-key and foreign-key columns of `table`.
pub fn key_columns(graph: &SchemaGraph, table: &str) -> BTreeSet<String> {
    let mut keys: BTreeSet<String> = graph.fk_columns(table).into_iter().collect();
    if let Some(t) = graph.table(table) {
        keys.extend(t.primary_key.iter().cloned());
    }
    keys
}

pub fn first_filter(
    question: &str,
    graph: &SchemaGraph,
    scorer: &dyn RelevanceScorer,
    cfg: &LinkConfig,
) -> Result<RankedSelection, LinkError> {
    let scores = scorer.score(question, graph).map_err(|message| LinkError::Scorer {
        scorer: scorer.name().to_string(),
        message,
    })?;
    let mut tables: Vec<(&str, f64)> = graph
        .tables
        .iter()
        .map(|t| (t.name.as_str(), scores.tables.get(&t.name).copied().unwrap_or(0.0)))
        .collect();
    tables.sort_by(|a, b| desc_then_name(*a, *b));
    tables.truncate(cfg.top_n_tables);
    let mut out = RankedSelection::default();
    for (name, score) in tables {
        let table = graph.table(name).expect("ranked from graph");
        let col_scores = scores.columns.get(name);
        let mut cols: Vec<(&str, f64)> = table
            .columns
            .iter()
            .map(|c| {
                let s = col_scores.and_then(|m| m.get(&c.name)).copied().unwrap_or(0.0);
                (c.name.as_str(), s)
            })
            .collect();
        cols.sort_by(|a, b| desc_then_name(*a, *b));
        let keys = key_columns(graph, name);
        let mut kept: Vec<RankedColumn> = Vec::new();
        for (i, (c, s)) in cols.iter().enumerate() {
            if i < cfg.top_n_columns_per_table || keys.contains(*c) {
                kept.push(RankedColumn {
                    name: c.to_string(),
                    score: *s,
                });
            }
        }
        out.tables.push(RankedTable {
            name: name.to_string(),
            score,
            columns: kept,
        });
    }
    Ok(out)
}

fn clean_item(s: &str) -> &str {
    let s = s.trim();
    let s = s.trim_start_matches(|c: char| c == '-' || c == '*' || c == '•' || c.is_whitespace());
    // Drop list numbering such as `1.` or `2)`.
    let digits = s.chars().take_while(char::is_ascii_digit).count();
    let s = if digits > 0 && s[digits..].starts_with(['.', ')']) {
        &s[digits + 1..]
    } else {
        s
    };
    s.trim()
        .trim_matches(|c: char| "\"'`“”‘’".contains(c))
        .trim()
}

/// Distinct keywords from a delimited response, first occurrence kept.
pub fn parse_keywords(response: &str) -> Vec<String> {
    let body = match response.to_ascii_lowercase().rfind("keywords:") {
        Some(pos) => &response[pos + "keywords:".len()..],
        None => response,
    };
    let mut seen = BTreeSet::new();
    body.split([',', '\n', ';'])
        .map(clean_item)
        .filter(|s| !s.is_empty())
        .filter(|s| seen.insert(s.to_lowercase()))
        .map(str::to_string)
        .collect()
}

pub fn extract_keywords(
    question: &str,
    evidence: &str,
    client: &JudgeClient<'_>,
    judge: &ModelHandle,
) -> Result<Vec<String>, LinkError> {
    if question.trim().is_empty() {
        return Err(LinkError::Keywords("empty question".into()));
    }
    let prompt = client
        .render(template::EXTRACT_KEYWORDS, &[("question", question), ("evidence", evidence)])
        .map_err(|e| LinkError::Keywords(e.to_string()))?;
    let mut last = String::from("no response");
    for attempt in 0..=client.max_reasks {
        let call = client.call(judge, template::EXTRACT_KEYWORDS, prompt.clone(), attempt);
        match client.judge.complete(&call) {
            Ok(text) => {
                let kws = parse_keywords(&text);
                if !kws.is_empty() {
                    return Ok(kws);
                }
                last = "response held no keywords".into();
            }
            Err(e) => return Err(LinkError::Keywords(e.to_string())),
        }
    }
    Err(LinkError::Keywords(last))
}

/// Parsed second-filter answer before intersection: table -> columns, where
/// `None` means the whole table.
fn parse_second_filter(response: &str) -> Vec<(String, Option<Vec<String>>)> {
    let mut out: Vec<(String, Option<Vec<String>>)> = Vec::new();
    for line in response.lines() {
        let line = clean_item(line);
        if line.is_empty() || line.starts_with("###") {
            continue;
        }
        if let Some((table, cols)) = line.split_once(':') {
            let cols: Vec<String> = cols
                .split(',')
                .map(clean_item)
                .filter(|c| !c.is_empty())
                .map(|c| c.rsplit_once('.').map_or(c, |(_, col)| col))
                .map(|c| clean_item(c).to_string())
                .collect();
            let table = clean_item(table).to_string();
            out.push((table, if cols.is_empty() { None } else { Some(cols) }));
            continue;
        }
        for item in line.split(',').map(clean_item).filter(|s| !s.is_empty()) {
            match item.split_once('.') {
                Some((t, c)) => out.push((clean_item(t).to_string(), Some(vec![clean_item(c).to_string()]))),
                None => out.push((item.to_string(), None)),
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecondFilterOutcome {
    pub selected: Selection,
    pub warnings: Vec<String>,
    pub raw: String,
}

/// Case-insensitive lookup of a name among `names`.
fn resolve<'a, I: IntoIterator<Item = &'a String>>(name: &str, names: I) -> Option<&'a String> {
    names.into_iter().find(|n| n.eq_ignore_ascii_case(name))
}

/// Intersect a second-filter answer with the first pass. Unknown entries are
/// dropped with a warning; an empty result falls back to the first pass;
/// key columns of kept tables that were in the first pass are re-added.
pub fn apply_second_filter(
    response: &str,
    first_pass: &Selection,
    graph: &SchemaGraph,
) -> SecondFilterOutcome {
    let mut selected = Selection::default();
    let mut warnings = Vec::new();
    for (table, cols) in parse_second_filter(response) {
        let Some(t) = resolve(&table, first_pass.tables.keys()) else {
            warnings.push(format!("second filter: dropped unknown table `{table}`"));
            continue;
        };
        let available = &first_pass.tables[t];
        match cols {
            None => {
                for c in available {
                    selected.insert(t, c);
                }
            }
            Some(cols) => {
                for c in cols {
                    match resolve(&c, available.iter()) {
                        Some(col) => selected.insert(t, col),
                        None => warnings.push(format!("second filter: dropped unknown column `{t}.{c}`")),
                    }
                }
            }
        }
    }
    if selected.is_empty() {
        warnings.push("second filter: nothing usable selected, keeping the first pass".into());
        selected = first_pass.clone();
    }
    let kept: Vec<String> = selected.tables.keys().cloned().collect();
    for t in kept {
        for k in key_columns(graph, &t) {
            if first_pass.contains(&t, &k) {
                selected.insert(&t, &k);
            }
        }
    }
    SecondFilterOutcome {
        selected,
        warnings,
        raw: response.to_string(),
    }
}

pub fn second_filter(
    question: &str,
    first_pass: &RankedSelection,
    graph: &SchemaGraph,
    keywords: &[String],
    matched: &[MatchedValue],
    client: &JudgeClient<'_>,
    judge: &ModelHandle,
) -> Result<SecondFilterOutcome, LinkError> {
    if first_pass.is_empty() {
        return Err(LinkError::EmptyFirstPass);
    }
    let first = first_pass.to_selection();
    let schema = serialize_schema(graph, Some(&first), None).map_err(|e| LinkError::Render(e.to_string()))?;
    let keywords = keywords.join(", ");
    let matched_block = render_matched_block(matched);
    let bindings = [
        ("question", question),
        ("keywords", keywords.as_str()),
        ("matched_values", matched_block.as_str()),
        ("table_info", schema.as_str()),
    ];
    match client.ask(judge, template::SECOND_FILTER, &bindings) {
        Ok(text) => Ok(apply_second_filter(&text, &first, graph)),
        Err(e) => Ok(SecondFilterOutcome {
            selected: first,
            warnings: vec![format!("second filter skipped: {e}")],
            raw: String::new(),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub step: String,
    pub output: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkResult {
    pub record_id: String,
    pub db_id: String,
    pub question: String,
    #[serde(default)]
    pub evidence: String,
    pub selected: Selection,
    pub matched_values: Vec<MatchedValue>,
    pub keywords: Vec<String>,
    pub stage_trace: Vec<StageTrace>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl Artifact for LinkResult {
    const KIND: &'static str = "link_result";
}

impl LinkResult {
    /// Schema text restricted to the selection.
    pub fn schema_text(&self, graph: &SchemaGraph) -> String {
        serialize_schema(graph, Some(&self.selected), None).unwrap_or_else(|_| {
            serialize_schema(graph, None, None).expect("full schema always renders")
        })
    }
}

/// Everything the per-record linking run needs.
pub struct Linker<'a> {
    pub scorer: &'a dyn RelevanceScorer,
    pub client: Option<(JudgeClient<'a>, &'a ModelHandle)>,
    pub cfg: &'a LinkConfig,
}

impl Linker<'_> {
    pub fn link(
        &self,
        record: &QuestionRecord,
        graph: &SchemaGraph,
        index: &ValueIndex,
    ) -> Result<LinkResult, LinkError> {
        let question = join_evidence(&record.evidence, &record.question);
        let mut trace = Vec::new();
        let mut warnings = Vec::new();

        let matched = value_match(&question, index, self.cfg);
        trace.push(StageTrace {
            step: "value_match".into(),
            output: json!(matched
                .iter()
                .map(|m| format!("{}.{} = {}", m.table, m.column, m.value))
                .collect::<Vec<_>>()),
        });

        let first = first_filter(&question, graph, self.scorer, self.cfg)?;
        trace.push(StageTrace {
            step: "first_filter".into(),
            output: serde_json::to_value(first.to_selection()).expect("selection serializes"),
        });

        let (keywords, selected) = match &self.client {
            Some((client, judge)) => {
                let keywords = match extract_keywords(&record.question, &record.evidence, client, judge) {
                    Ok(k) => k,
                    Err(e) => {
                        warnings.push(format!("{e}; using question tokens"));
                        distinct_tokens(&record.question)
                    }
                };
                trace.push(StageTrace {
                    step: "extract_keywords".into(),
                    output: json!(keywords),
                });
                let second = if first.is_empty() {
                    SecondFilterOutcome {
                        selected: Selection::default(),
                        warnings: vec!["graph has no tables".into()],
                        raw: String::new(),
                    }
                } else {
                    second_filter(&question, &first, graph, &keywords, &matched, client, judge)?
                };
                warnings.extend(second.warnings);
                trace.push(StageTrace {
                    step: "second_filter".into(),
                    output: serde_json::to_value(&second.selected).expect("selection serializes"),
                });
                (keywords, second.selected)
            }
            None => (distinct_tokens(&record.question), first.to_selection()),
        };
        Ok(LinkResult {
            record_id: record.record_id.clone(),
            db_id: record.db_id.clone(),
            question: record.question.clone(),
            evidence: record.evidence.clone(),
            selected,
            matched_values: matched,
            keywords,
            stage_trace: trace,
            warnings,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{build_value_index, introspect, IndexConfig};
    use crate::dataset::ModelKind;
    use crate::judge::{FnJudge, JudgeCall, TemplateRegistry};
    use crate::test_support;
    use proptest::prelude::*;

    fn school() -> (SchemaGraph, ValueIndex) {
        let dir = tempfile::tempdir().unwrap();
        let db = test_support::build_db(dir.path(), "school");
        let g = introspect(&db).unwrap();
        let idx = build_value_index(&db, &g, &IndexConfig::default()).unwrap();
        (g, idx)
    }

    fn graph(name: &str) -> SchemaGraph {
        let dir = tempfile::tempdir().unwrap();
        introspect(&test_support::build_db(dir.path(), name)).unwrap()
    }

    #[test]
    fn san_joaquin_ranks_first() {
        let (_, idx) = school();
        let m = value_match("how many are active in San Joaquin?", &idx, &LinkConfig::default());
        assert_eq!((m[0].table.as_str(), m[0].column.as_str(), m[0].value.as_str()), ("schools", "city", "San Joaquin"));
        assert!(m[0].score > 0.0);
    }

    #[test]
    fn no_overlap_no_matches() {
        let (_, idx) = school();
        assert!(value_match("xyz qq", &idx, &LinkConfig::default()).is_empty());
        assert!(value_match("", &idx, &LinkConfig::default()).is_empty());
    }

    #[test]
    fn numeric_cells_match_by_token() {
        let dir = tempfile::tempdir().unwrap();
        let db = test_support::build_db(dir.path(), "concert");
        let g = introspect(&db).unwrap();
        let idx = build_value_index(&db, &g, &IndexConfig::default()).unwrap();
        let m = value_match("Which singers were born in 1945?", &idx, &LinkConfig::default());
        let hits: Vec<_> = m
            .iter()
            .filter(|v| v.value == "1945")
            .map(|v| format!("{}.{}", v.table, v.column))
            .collect();
        assert_eq!(hits, ["concert.year", "singer.birth_year"]);
        assert_eq!(render_matched_block(&m[..2]), "concert.year ( 1945 )\nsinger.birth_year ( 1945 )");
    }

    #[test]
    fn truncates_to_max() {
        let (_, idx) = school();
        let cfg = LinkConfig {
            max_matched_values: 1,
            ..LinkConfig::default()
        };
        assert_eq!(value_match("San Joaquin Fresno Active", &idx, &cfg).len(), 1);
    }

    #[test]
    fn school_name_table_ranks_first() {
        let g = graph("california_schools");
        let ranked = first_filter(
            "What is the school name with the highest enrollment?",
            &g,
            &LexicalScorer::default(),
            &LinkConfig::default(),
        )
        .unwrap();
        assert_eq!(ranked.tables[0].name, "frpm");
        assert_eq!(ranked.tables[0].columns[0].name, "school name");
        assert_eq!(ranked.tables.len(), 5);
    }

    #[test]
    fn key_columns_survive_cutoff() {
        let g = graph("concert");
        let cfg = LinkConfig {
            top_n_tables: 1,
            top_n_columns_per_table: 1,
            ..LinkConfig::default()
        };
        let ranked = first_filter("concert venue", &g, &LexicalScorer::default(), &cfg).unwrap();
        assert_eq!(ranked.tables.len(), 1);
        let t = &ranked.tables[0];
        assert_eq!(t.name, "concert");
        let names: Vec<_> = t.columns.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names[0], "venue");
        assert!(names.contains(&"singer_id"), "{names:?}");
        assert!(names.contains(&"concert_id"), "{names:?}");
    }

    #[test]
    fn keyword_parsing() {
        assert_eq!(
            parse_keywords("schools, mailing street, lowest average score"),
            ["schools", "mailing street", "lowest average score"]
        );
        assert_eq!(parse_keywords("Keywords: a, B, b, \"a\"\n- c"), ["a", "B", "c"]);
        assert!(parse_keywords(" , \n").is_empty());
    }

    fn client_with<'a>(judge: &'a dyn crate::judge::Judge, reg: &'a TemplateRegistry) -> JudgeClient<'a> {
        JudgeClient::new(judge, reg)
    }

    #[test]
    fn keyword_extraction_guards_and_calls() {
        let reg = TemplateRegistry::builtin();
        let judge = FnJudge(|_: &JudgeCall| Ok("schools, mailing street, lowest average score".to_string()));
        let client = client_with(&judge, &reg);
        let h = ModelHandle::new("kw", ModelKind::Judge);
        assert_eq!(extract_keywords("q?", "", &client, &h).unwrap().len(), 3);
        let never = FnJudge(|_: &JudgeCall| -> Result<String, _> { panic!("must not be called") });
        assert!(extract_keywords("  ", "", &client_with(&never, &reg), &h).is_err());
    }

    #[test]
    fn second_filter_shrinks_only() {
        let g = graph("concert");
        let first = g.full_selection();
        let echo = "singer: singer_id, name, country, birth_year, age\nconcert: concert_id, concert_name, venue, year, singer_id";
        assert_eq!(apply_second_filter(echo, &first, &g).selected, first);

        let sub = apply_second_filter("singer: name, country", &first, &g);
        let cols: Vec<_> = sub.selected.tables["singer"].iter().cloned().collect();
        assert_eq!(cols, ["country", "name", "singer_id"]);
        assert_eq!(sub.selected.tables.len(), 1);

        let unknown = apply_second_filter("ghosts: a\nsinger.name", &first, &g);
        assert_eq!(unknown.warnings.len(), 1);
        assert!(unknown.selected.contains("singer", "name"));
        assert!(!unknown.selected.contains_table("ghosts"));

        let empty = apply_second_filter("nothing useful", &first, &g);
        assert_eq!(empty.selected, first);
    }

    #[test]
    fn link_traces_all_four_steps() {
        let (g, idx) = school();
        let reg = TemplateRegistry::builtin();
        let judge = FnJudge(|c: &JudgeCall| {
            Ok(match c.template_id.as_str() {
                template::EXTRACT_KEYWORDS => "active, San Joaquin".to_string(),
                _ => "schools: city, statustype".to_string(),
            })
        });
        let h = ModelHandle::new("j", ModelKind::Judge);
        let cfg = LinkConfig::default();
        let scorer = LexicalScorer::default();
        let linker = Linker {
            scorer: &scorer,
            client: Some((client_with(&judge, &reg), &h)),
            cfg: &cfg,
        };
        let rec = QuestionRecord {
            record_id: "r".into(),
            question: "How many active schools are in San Joaquin?".into(),
            evidence: String::new(),
            db_id: "school".into(),
            gold_sql: String::new(),
            difficulty: Default::default(),
            repaired: false,
            original_sql: None,
            extra: Default::default(),
        };
        let res = linker.link(&rec, &g, &idx).unwrap();
        let steps: Vec<_> = res.stage_trace.iter().map(|s| s.step.as_str()).collect();
        assert_eq!(steps, ["value_match", "first_filter", "extract_keywords", "second_filter"]);
        let cols: Vec<_> = res.selected.tables["schools"].iter().cloned().collect();
        assert_eq!(cols, ["cdscode", "city", "statustype"]);
        assert!(res.schema_text(&g).starts_with("CREATE TABLE schools ("));
    }

    proptest! {
        #[test]
        fn pruning_is_monotone(lines in prop::collection::vec("[a-z_. ,:]{0,30}", 0..6), top in 1usize..3, cols in 1usize..4) {
            let g = graph("concert");
            let cfg = LinkConfig { top_n_tables: top, top_n_columns_per_table: cols, ..LinkConfig::default() };
            let first = first_filter("singer name concert year", &g, &LexicalScorer::default(), &cfg).unwrap().to_selection();
            prop_assert!(first.is_subset_of(&g.full_selection()));
            let mut response = lines.join("\n");
            response.push_str("\nsinger: name\nconcert.venue");
            let second = apply_second_filter(&response, &first, &g);
            prop_assert!(second.selected.is_subset_of(&first));
        }
    }
}

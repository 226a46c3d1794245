//! Benchmark datasets (Bird / Spider JSON), prediction files and model
//! handles.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::artifact::{self, Artifact, ArtifactError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Simple,
    Moderate,
    Challenging,
    #[default]
    Unknown,
}

impl Difficulty {
    pub fn parse(s: &str) -> Self {
        match s.trim().to_ascii_lowercase().as_str() {
            "simple" => Difficulty::Simple,
            "moderate" => Difficulty::Moderate,
            "challenging" => Difficulty::Challenging,
            _ => Difficulty::Unknown,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Simple => "simple",
            Difficulty::Moderate => "moderate",
            Difficulty::Challenging => "challenging",
            Difficulty::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceFormat {
    Bird,
    Spider,
}

impl std::str::FromStr for SourceFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bird" => Ok(SourceFormat::Bird),
            "spider" => Ok(SourceFormat::Spider),
            other => Err(format!("unknown dataset format `{other}` (expected bird|spider)")),
        }
    }
}

impl SourceFormat {
    fn sql_key(self) -> &'static str {
        match self {
            SourceFormat::Bird => "SQL",
            SourceFormat::Spider => "query",
        }
    }
}

/// One benchmark item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub record_id: String,
    pub question: String,
    #[serde(default)]
    pub evidence: String,
    pub db_id: String,
    #[serde(default)]
    pub gold_sql: String,
    #[serde(default)]
    pub difficulty: Difficulty,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub repaired: bool,
    /// Gold SQL before repair replaced it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_sql: Option<String>,
    /// Source keys not mapped onto the fields above, kept for write-back.
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub extra: Map<String, Value>,
}

impl Artifact for QuestionRecord {
    const KIND: &'static str = "question_record";
}

impl QuestionRecord {
    /// Question text with the evidence hint prefixed (`<evidence>; <question>`),
    /// which is how hints are bound into every prompt.
    pub fn question_with_evidence(&self) -> String {
        join_evidence(&self.evidence, &self.question)
    }
}

pub fn join_evidence(evidence: &str, question: &str) -> String {
    let e = evidence.trim().trim_end_matches(';').trim_end();
    if e.is_empty() {
        question.trim().to_string()
    } else {
        format!("{e}; {}", question.trim())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub name: String,
    pub records: Vec<QuestionRecord>,
    pub source_format: SourceFormat,
}

impl DatasetSplit {
    pub fn get(&self, record_id: &str) -> Option<&QuestionRecord> {
        self.records.iter().find(|r| r.record_id == record_id)
    }

    pub fn by_id(&self) -> BTreeMap<&str, &QuestionRecord> {
        self.records.iter().map(|r| (r.record_id.as_str(), r)).collect()
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {path} at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: usize,
        message: String,
    },
    #[error("{path}: record {index}: {message}")]
    Schema {
        path: PathBuf,
        index: usize,
        message: String,
    },
    #[error("{path}: duplicate record id `{record_id}`")]
    DuplicateId { path: PathBuf, record_id: String },
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

fn byte_offset(text: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut current = 1;
    let mut start = 0;
    for (i, b) in text.iter().enumerate() {
        if current == line {
            break;
        }
        if *b == b'\n' {
            current += 1;
            start = i + 1;
        }
    }
    (start + column.saturating_sub(1)).min(text.len())
}

/// Load a Bird or Spider JSON file. The split name is the file stem.
pub fn load_dataset(path: &Path, format: SourceFormat) -> Result<DatasetSplit, DatasetError> {
    let bytes = fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "split".into());
    parse_dataset(&bytes, &name, format, path)
}

pub fn parse_dataset(
    bytes: &[u8],
    name: &str,
    format: SourceFormat,
    path: &Path,
) -> Result<DatasetSplit, DatasetError> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| DatasetError::Parse {
        path: path.to_path_buf(),
        offset: byte_offset(bytes, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let Value::Array(items) = value else {
        return Err(DatasetError::Parse {
            path: path.to_path_buf(),
            offset: 0,
            message: "top-level value is not a JSON array".into(),
        });
    };
    let schema_err = |index: usize, message: String| DatasetError::Schema {
        path: path.to_path_buf(),
        index,
        message,
    };
    let mut records = Vec::with_capacity(items.len());
    let mut seen = HashSet::new();
    for (index, item) in items.into_iter().enumerate() {
        let Value::Object(mut obj) = item else {
            return Err(schema_err(index, "not a JSON object".into()));
        };
        let take_str = |obj: &mut Map<String, Value>, key: &str, required: bool| {
            match obj.remove(key) {
                Some(Value::String(s)) => Ok(Some(s)),
                Some(Value::Null) | None if !required => Ok(None),
                None => Err(schema_err(index, format!("missing required key `{key}`"))),
                Some(other) => Err(schema_err(
                    index,
                    format!("key `{key}` must be a string, found {other}"),
                )),
            }
        };
        let question = take_str(&mut obj, "question", true)?.unwrap_or_default();
        let db_id = take_str(&mut obj, "db_id", true)?.unwrap_or_default();
        let gold_sql = take_str(&mut obj, format.sql_key(), false)?.unwrap_or_default();
        let (evidence, difficulty) = match format {
            SourceFormat::Bird => (
                take_str(&mut obj, "evidence", false)?.unwrap_or_default(),
                take_str(&mut obj, "difficulty", false)?
                    .map(|d| Difficulty::parse(&d))
                    .unwrap_or_default(),
            ),
            SourceFormat::Spider => (String::new(), Difficulty::Unknown),
        };
        let repaired = matches!(obj.remove("repaired"), Some(Value::Bool(true)));
        let original_sql = take_str(&mut obj, "original_sql", false)?;
        let record_id = match obj.remove("record_id") {
            Some(Value::String(s)) => s,
            Some(other) => return Err(schema_err(index, format!("bad record_id {other}"))),
            None => format!("{name}:{index}"),
        };
        if !seen.insert(record_id.clone()) {
            return Err(DatasetError::DuplicateId {
                path: path.to_path_buf(),
                record_id,
            });
        }
        records.push(QuestionRecord {
            record_id,
            question,
            evidence,
            db_id,
            gold_sql,
            difficulty,
            repaired,
            original_sql,
            extra: obj,
        });
    }
    Ok(DatasetSplit {
        name: name.to_string(),
        records,
        source_format: format,
    })
}

/// Render a split back into its source JSON shape.
pub fn dataset_to_json(split: &DatasetSplit) -> Value {
    let items = split
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut obj = r.extra.clone();
            obj.insert("question".into(), r.question.clone().into());
            obj.insert("db_id".into(), r.db_id.clone().into());
            obj.insert(split.source_format.sql_key().into(), r.gold_sql.clone().into());
            if split.source_format == SourceFormat::Bird {
                obj.insert("evidence".into(), r.evidence.clone().into());
                if r.difficulty != Difficulty::Unknown {
                    obj.insert("difficulty".into(), r.difficulty.as_str().into());
                }
            }
            if r.record_id != format!("{}:{i}", split.name) {
                obj.insert("record_id".into(), r.record_id.clone().into());
            }
            if r.repaired {
                obj.insert("repaired".into(), true.into());
            }
            if let Some(orig) = &r.original_sql {
                obj.insert("original_sql".into(), orig.clone().into());
            }
            Value::Object(obj)
        })
        .collect();
    Value::Array(items)
}

pub fn write_dataset(split: &DatasetSplit, path: &Path) -> Result<(), ArtifactError> {
    artifact::write_json(&dataset_to_json(split), path)
}

/// Load either a source JSON dataset or a `question_record` JSON Lines
/// artifact (chosen by the `.jsonl` extension).
pub fn load_any(path: &Path, format: SourceFormat) -> Result<DatasetSplit, DatasetError> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        let records: Vec<QuestionRecord> = artifact::read_artifact(path)?;
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.record_id.clone()) {
                return Err(DatasetError::DuplicateId {
                    path: path.to_path_buf(),
                    record_id: r.record_id.clone(),
                });
            }
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(DatasetSplit {
            name,
            records,
            source_format: format,
        })
    } else {
        load_dataset(path, format)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub record_id: String,
    pub sql: String,
    #[serde(default)]
    pub model: String,
}

impl Artifact for Prediction {
    const KIND: &'static str = "prediction";
}

/// Predicted SQL per record for one model.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictionFile {
    pub model_handle: String,
    pub entries: BTreeMap<String, String>,
}

impl PredictionFile {
    pub fn from_predictions(preds: Vec<Prediction>) -> Self {
        let model_handle = preds.first().map(|p| p.model.clone()).unwrap_or_default();
        Self {
            model_handle,
            entries: preds.into_iter().map(|p| (p.record_id, p.sql)).collect(),
        }
    }

    pub fn read(path: &Path) -> Result<Self, ArtifactError> {
        Ok(Self::from_predictions(artifact::read_artifact(path)?))
    }

    pub fn to_predictions(&self) -> Vec<Prediction> {
        self.entries
            .iter()
            .map(|(id, sql)| Prediction {
                record_id: id.clone(),
                sql: sql.clone(),
                model: self.model_handle.clone(),
            })
            .collect()
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("predictions missing for {} record(s): {}", missing.len(), missing.join(", "))]
pub struct CoverageError {
    pub missing: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Joined<'a> {
    pub pairs: Vec<(&'a QuestionRecord, String)>,
    /// Prediction ids absent from the split (reported, not fatal).
    pub extra_ids: Vec<String>,
}

pub fn join_predictions<'a>(
    split: &'a DatasetSplit,
    preds: &PredictionFile,
) -> Result<Joined<'a>, CoverageError> {
    let missing: Vec<String> = split
        .records
        .iter()
        .filter(|r| !preds.entries.contains_key(&r.record_id))
        .map(|r| r.record_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(CoverageError { missing });
    }
    let ids: HashSet<&str> = split.records.iter().map(|r| r.record_id.as_str()).collect();
    let extra_ids: Vec<String> = preds
        .entries
        .keys()
        .filter(|k| !ids.contains(k.as_str()))
        .cloned()
        .collect();
    for id in &extra_ids {
        log::warn!("prediction for unknown record `{id}` ignored");
    }
    let pairs = split
        .records
        .iter()
        .map(|r| (r, preds.entries[&r.record_id].clone()))
        .collect();
    Ok(Joined { pairs, extra_ids })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Generator,
    Judge,
    Scorer,
}

/// How a judge is asked the query/SQL consistency question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckFormat {
    /// Zero-shot `{"Completed": ..., "Reason": ...}` prompt.
    #[default]
    MultiLlm,
    /// Fine-tuned checker answering `1` / `0`.
    FineTuned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelHandle {
    pub name: String,
    pub kind: ModelKind,
    #[serde(default)]
    pub endpoint_config_key: String,
    #[serde(default)]
    pub check_format: CheckFormat,
}

impl ModelHandle {
    pub fn new(name: impl Into<String>, kind: ModelKind) -> Self {
        Self {
            name: name.into(),
            kind,
            endpoint_config_key: String::new(),
            check_format: CheckFormat::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str, fmt: SourceFormat) -> Result<DatasetSplit, DatasetError> {
        parse_dataset(s.as_bytes(), "train", fmt, Path::new("train.json"))
    }

    #[test]
    fn empty_array_is_empty_split() {
        assert!(parse("[]", SourceFormat::Bird).unwrap().records.is_empty());
    }

    #[test]
    fn bird_keys_are_mapped() {
        let s = parse(
            r#"[{"question":"q","evidence":"e","db_id":"d","SQL":"SELECT 1","difficulty":"moderate","question_id":7}]"#,
            SourceFormat::Bird,
        )
        .unwrap();
        let r = &s.records[0];
        assert_eq!(r.record_id, "train:0");
        assert_eq!(r.evidence, "e");
        assert_eq!(r.gold_sql, "SELECT 1");
        assert_eq!(r.difficulty, Difficulty::Moderate);
        assert_eq!(r.extra["question_id"], 7);
    }

    #[test]
    fn spider_has_empty_evidence_and_unknown_difficulty() {
        let s = parse(
            r#"[{"question":"q","db_id":"d","query":"SELECT 1"},{"question":"r","db_id":"d","query":"SELECT 2"}]"#,
            SourceFormat::Spider,
        )
        .unwrap();
        assert_eq!(s.records.len(), 2);
        assert_eq!(s.records[1].record_id, "train:1");
        assert_eq!(s.records[0].evidence, "");
        assert_eq!(s.records[0].difficulty, Difficulty::Unknown);
    }

    #[test]
    fn missing_question_reports_index() {
        let err = parse(
            r#"[{"question":"a","db_id":"d"},{"question":"b","db_id":"d"},{"db_id":"d"}]"#,
            SourceFormat::Bird,
        )
        .unwrap_err();
        match err {
            DatasetError::Schema { index, message, .. } => {
                assert_eq!(index, 2);
                assert!(message.contains("question"));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn malformed_json_reports_byte_offset() {
        let text = "[\n{\"question\": }\n]";
        match parse(text, SourceFormat::Bird).unwrap_err() {
            DatasetError::Parse { offset, .. } => {
                assert_eq!(&text[offset..offset + 1], "}");
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn evidence_join() {
        assert_eq!(join_evidence("", "How many?"), "How many?");
        assert_eq!(
            join_evidence("x refers to y = 1;", "Name it."),
            "x refers to y = 1; Name it."
        );
        assert_eq!(join_evidence("x refers to y", "Name it."), "x refers to y; Name it.");
    }

    #[test]
    fn join_reports_missing_and_extra() {
        let split = parse(
            r#"[{"question":"a","db_id":"d"},{"question":"b","db_id":"d"},{"question":"c","db_id":"d"}]"#,
            SourceFormat::Bird,
        )
        .unwrap();
        let mut preds = PredictionFile::default();
        for id in ["train:0", "train:1", "train:2", "other:9"] {
            preds.entries.insert(id.into(), format!("SELECT '{id}'"));
        }
        let joined = join_predictions(&split, &preds).unwrap();
        assert_eq!(joined.pairs.len(), 3);
        assert_eq!(joined.pairs[2].0.record_id, "train:2");
        assert_eq!(joined.extra_ids, vec!["other:9".to_string()]);

        preds.entries.remove("train:1");
        let err = join_predictions(&split, &preds).unwrap_err();
        assert_eq!(err.missing, vec!["train:1".to_string()]);
    }

    #[test]
    fn write_back_preserves_shape() {
        let text = r#"[{"question":"a","evidence":"","db_id":"d","SQL":"SELECT 1","difficulty":"simple","question_id":0}]"#;
        let split = parse(text, SourceFormat::Bird).unwrap();
        let json = dataset_to_json(&split);
        let again = parse(&json.to_string(), SourceFormat::Bird).unwrap();
        assert_eq!(again, split);
    }
}

//! Inverted index over database cell values for BM25 value matching.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{open_read_only, quote_ident, CatalogError, SchemaGraph};
use crate::text::{tokenize, Bm25Params};
use crate::value::SqlValue;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexConfig {
    /// Cells longer than this (in chars) are not indexed.
    pub max_cell_chars: usize,
    /// Distinct values read per column; `None` reads all.
    pub max_values_per_column: Option<usize>,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            max_cell_chars: 64,
            max_values_per_column: Some(100_000),
        }
    }
}

/// One distinct (table, column, value) document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexedCell {
    pub table: String,
    pub column: String,
    pub value: String,
    pub token_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Posting {
    pub cell: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueIndex {
    pub db_id: String,
    pub cells: Vec<IndexedCell>,
    pub postings: BTreeMap<String, Vec<Posting>>,
    pub avg_len: f64,
}

/// A cell value retrieved for a question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedValue {
    pub table: String,
    pub column: String,
    pub value: String,
    /// BM25 score of the cell against the question (0 for substring-only hits).
    pub score: f64,
    /// Longest common substring with the question, in chars.
    pub substring_len: usize,
}

impl ValueIndex {
    pub fn from_cells(db_id: &str, raw: Vec<(String, String, String)>) -> Self {
        let mut cells = Vec::with_capacity(raw.len());
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut total = 0usize;
        for (i, (table, column, value)) in raw.into_iter().enumerate() {
            let tokens = tokenize(&value);
            let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
            for t in &tokens {
                *tf.entry(t.as_str()).or_default() += 1;
            }
            for (t, n) in tf {
                postings.entry(t.to_string()).or_default().push(Posting {
                    cell: i as u32,
                    tf: n,
                });
            }
            total += tokens.len();
            cells.push(IndexedCell {
                table,
                column,
                value,
                token_count: tokens.len(),
            });
        }
        let avg_len = if cells.is_empty() {
            0.0
        } else {
            total as f64 / cells.len() as f64
        };
        Self {
            db_id: db_id.to_string(),
            cells,
            postings,
            avg_len,
        }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Cells containing `token`, as (table, column, value).
    pub fn lookup(&self, token: &str) -> Vec<(&str, &str, &str)> {
        self.postings
            .get(token)
            .map(|ps| {
                ps.iter()
                    .map(|p| {
                        let c = &self.cells[p.cell as usize];
                        (c.table.as_str(), c.column.as_str(), c.value.as_str())
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    /// BM25 score of every cell sharing at least one of `terms`.
    pub fn bm25_scores(&self, terms: &[String], params: &Bm25Params) -> BTreeMap<u32, f64> {
        let n = self.cells.len();
        let mut scores: BTreeMap<u32, f64> = BTreeMap::new();
        for term in terms {
            let Some(ps) = self.postings.get(term) else {
                continue;
            };
            let idf = params.idf(n, ps.len());
            for p in ps {
                let dl = self.cells[p.cell as usize].token_count as f64;
                *scores.entry(p.cell).or_default() +=
                    params.term_weight(p.tf as f64, dl, self.avg_len, idf);
            }
        }
        scores
    }
}

/// Index every short text or numeric cell of every table in `graph`.
pub fn build_value_index(
    db_file: &Path,
    graph: &SchemaGraph,
    cfg: &IndexConfig,
) -> Result<ValueIndex, CatalogError> {
    let conn = open_read_only(db_file)?;
    let read_err = |e: rusqlite::Error| CatalogError::Read {
        path: db_file.to_path_buf(),
        message: e.to_string(),
    };
    let mut raw = Vec::new();
    for table in &graph.tables {
        for col in &table.columns {
            let limit = cfg
                .max_values_per_column
                .map(|n| format!(" LIMIT {n}"))
                .unwrap_or_default();
            let sql = format!(
                "SELECT DISTINCT {c} FROM {t} WHERE {c} IS NOT NULL{limit}",
                c = quote_ident(&col.name),
                t = quote_ident(&table.name)
            );
            let mut stmt = conn.prepare(&sql).map_err(read_err)?;
            let mut rows = stmt.query([]).map_err(read_err)?;
            let mut values = Vec::new();
            while let Some(row) = rows.next().map_err(read_err)? {
                let text = match SqlValue::from(row.get_ref(0).map_err(read_err)?) {
                    SqlValue::Text(t) => t,
                    v @ (SqlValue::Integer(_) | SqlValue::Real(_)) => v.display_plain(),
                    _ => continue,
                };
                if text.trim().is_empty() || text.chars().count() > cfg.max_cell_chars {
                    continue;
                }
                values.push(text);
            }
            values.sort();
            values.dedup();
            raw.extend(
                values
                    .into_iter()
                    .map(|v| (table.name.clone(), col.name.clone(), v)),
            );
        }
    }
    Ok(ValueIndex::from_cells(&graph.db_id, raw))
}

//! Schema text in the prompt format shared by every generation, correction
//! and selection prompt:
//!
//! ```text
//! CREATE TABLE movies (
//! "movie_release_year" INTEGER COMMENT movie_release_year; VALUES: [2007,2006],
//! PRIMARY KEY ("movie_id")
//! )
//! Foreign_key: [ratings.movie_id = movies.movie_id]
//! ```

use std::fmt::Write as _;

use super::{ForeignKey, MatchedValue, SchemaGraph, Selection, SelectionError};

pub const FOREIGN_KEY_PREFIX: &str = "Foreign_key: ";
pub const MATCH_VALUE_HEADER: &str = "### Match value:matched contents:";

/// Render `graph` (optionally restricted to `selection`) followed by the
/// foreign-key line and, when given and non-empty, the matched-values block.
pub fn serialize_schema(
    graph: &SchemaGraph,
    selection: Option<&Selection>,
    matched: Option<&[MatchedValue]>,
) -> Result<String, SelectionError> {
    if let Some(sel) = selection {
        let unknown = sel.unknown_items(graph);
        if !unknown.is_empty() {
            return Err(SelectionError { unknown });
        }
    }
    let mut out = String::new();
    let mut first = true;
    for table in &graph.tables {
        let cols = match selection {
            Some(sel) => match sel.tables.get(&table.name) {
                Some(c) => Some(c),
                None => continue,
            },
            None => None,
        };
        if !first {
            out.push_str("\n\n");
        }
        first = false;
        let _ = writeln!(out, "CREATE TABLE {} (", table.name);
        for col in &table.columns {
            if cols.is_some_and(|c| !c.contains(&col.name)) {
                continue;
            }
            let ty = if col.declared_type.is_empty() {
                "BLOB"
            } else {
                col.declared_type.as_str()
            };
            let values: Vec<String> = col.samples.iter().map(|v| v.display_plain()).collect();
            let _ = writeln!(
                out,
                "\"{}\" {} COMMENT {}; VALUES: [{}],",
                col.name,
                ty,
                col.comment,
                values.join(",")
            );
        }
        let _ = writeln!(out, "PRIMARY KEY (\"{}\")", table.primary_key.join(", "));
        out.push(')');
    }
    if !first {
        out.push('\n');
    }
    let fks: Vec<&ForeignKey> = graph
        .foreign_keys
        .iter()
        .filter(|fk| match selection {
            None => true,
            Some(sel) => {
                sel.contains(&fk.from_table, &fk.from_column) && sel.contains(&fk.to_table, &fk.to_column)
            }
        })
        .collect();
    let edges: Vec<String> = fks
        .iter()
        .map(|fk| {
            format!(
                "{}.{} = {}.{}",
                fk.from_table, fk.from_column, fk.to_table, fk.to_column
            )
        })
        .collect();
    let _ = write!(out, "{FOREIGN_KEY_PREFIX}[{}]", edges.join(", "));
    if let Some(m) = matched.filter(|m| !m.is_empty()) {
        let _ = write!(out, "\n\n{MATCH_VALUE_HEADER}\n{}", render_matched_block(m));
    }
    Ok(out)
}

/// One line per (table, column), in first-appearance order:
/// `table.column ( v1 , v2 )`.
pub fn render_matched_block(matched: &[MatchedValue]) -> String {
    let mut groups: Vec<((&str, &str), Vec<&str>)> = Vec::new();
    for m in matched {
        let key = (m.table.as_str(), m.column.as_str());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, vals)) => {
                if !vals.contains(&m.value.as_str()) {
                    vals.push(&m.value)
                }
            }
            None => groups.push((key, vec![&m.value])),
        }
    }
    groups
        .iter()
        .map(|((t, c), vals)| format!("{t}.{c} ( {} )", vals.join(" , ")))
        .collect::<Vec<_>>()
        .join("\n")
}

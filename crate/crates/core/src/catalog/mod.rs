//! Database introspection, schema rendering and the cell-value index.

mod index;
mod render;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::Artifact;
use crate::value::SqlValue;

pub use index::{build_value_index, IndexConfig, IndexedCell, MatchedValue, ValueIndex};
pub use render::{render_matched_block, serialize_schema, FOREIGN_KEY_PREFIX, MATCH_VALUE_HEADER};

/// Samples longer than this are not shown in `VALUES: [...]`.
pub const SAMPLE_VALUE_MAX_CHARS: usize = 64;
pub const MAX_SAMPLE_VALUES: usize = 2;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("cannot open database {path}: {message}")]
    Open { path: PathBuf, message: String },
    #[error("error reading {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("database `{db_id}` not found under {root}")]
    UnknownDb { db_id: String, root: PathBuf },
    #[error("bad comments sidecar {path}: {message}")]
    Comments { path: PathBuf, message: String },
}

#[derive(Debug, Error, PartialEq)]
#[error("selection references unknown schema items: {}", unknown.join(", "))]
pub struct SelectionError {
    pub unknown: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    pub declared_type: String,
    pub comment: String,
    #[serde(default)]
    pub samples: Vec<SqlValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableDef {
    pub name: String,
    pub columns: Vec<ColumnDef>,
    #[serde(default)]
    pub primary_key: Vec<String>,
}

impl TableDef {
    pub fn column(&self, name: &str) -> Option<&ColumnDef> {
        self.columns.iter().find(|c| c.name.eq_ignore_ascii_case(name))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ForeignKey {
    pub from_table: String,
    pub from_column: String,
    pub to_table: String,
    pub to_column: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaGraph {
    pub db_id: String,
    pub tables: Vec<TableDef>,
    pub foreign_keys: Vec<ForeignKey>,
}

impl Artifact for SchemaGraph {
    const KIND: &'static str = "schema_graph";
}

impl SchemaGraph {
    pub fn table(&self, name: &str) -> Option<&TableDef> {
        self.tables.iter().find(|t| t.name.eq_ignore_ascii_case(name))
    }

    /// Lowercased table names.
    pub fn table_names(&self) -> BTreeSet<String> {
        self.tables.iter().map(|t| t.name.to_lowercase()).collect()
    }

    /// Columns of `table` that take part in any foreign-key edge.
    pub fn fk_columns(&self, table: &str) -> Vec<String> {
        let mut out = Vec::new();
        for fk in &self.foreign_keys {
            if fk.from_table.eq_ignore_ascii_case(table) {
                out.push(fk.from_column.clone());
            }
            if fk.to_table.eq_ignore_ascii_case(table) {
                out.push(fk.to_column.clone());
            }
        }
        out
    }

    /// Every table with every column.
    pub fn full_selection(&self) -> Selection {
        let mut sel = Selection::default();
        for t in &self.tables {
            sel.tables.insert(
                t.name.clone(),
                t.columns.iter().map(|c| c.name.clone()).collect(),
            );
        }
        sel
    }

    /// Selection covering all columns of the named tables (case-insensitive).
    /// Unknown names are ignored.
    pub fn selection_for_tables<'a, I: IntoIterator<Item = &'a str>>(&self, names: I) -> Selection {
        let mut sel = Selection::default();
        for n in names {
            if let Some(t) = self.table(n) {
                sel.tables.insert(
                    t.name.clone(),
                    t.columns.iter().map(|c| c.name.clone()).collect(),
                );
            }
        }
        sel
    }
}

/// A table → columns subset of a schema, using the graph's spelling of names.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub tables: BTreeMap<String, BTreeSet<String>>,
}

impl Selection {
    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    pub fn contains_table(&self, table: &str) -> bool {
        self.tables.contains_key(table)
    }

    pub fn contains(&self, table: &str, column: &str) -> bool {
        self.tables.get(table).is_some_and(|c| c.contains(column))
    }

    pub fn insert(&mut self, table: &str, column: &str) {
        self.tables
            .entry(table.to_string())
            .or_default()
            .insert(column.to_string());
    }

    /// `self ⊆ other`, table- and column-wise.
    pub fn is_subset_of(&self, other: &Selection) -> bool {
        self.tables.iter().all(|(t, cols)| {
            other
                .tables
                .get(t)
                .is_some_and(|o| cols.iter().all(|c| o.contains(c)))
        })
    }

    /// Names not present in `graph`, as `table` or `table.column`.
    pub fn unknown_items(&self, graph: &SchemaGraph) -> Vec<String> {
        let mut unknown = Vec::new();
        for (t, cols) in &self.tables {
            match graph.tables.iter().find(|td| &td.name == t) {
                None => unknown.push(t.clone()),
                Some(td) => {
                    for c in cols {
                        if !td.columns.iter().any(|cd| &cd.name == c) {
                            unknown.push(format!("{t}.{c}"));
                        }
                    }
                }
            }
        }
        unknown
    }
}

pub(crate) fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

pub(crate) fn open_read_only(path: &Path) -> Result<Connection, CatalogError> {
    if !path.is_file() {
        return Err(CatalogError::Open {
            path: path.to_path_buf(),
            message: "no such file".into(),
        });
    }
    Connection::open_with_flags(
        path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX | OpenFlags::SQLITE_OPEN_URI,
    )
    .map_err(|e| CatalogError::Open {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

type CommentMap = HashMap<String, HashMap<String, String>>;

fn load_comments(db_file: &Path, db_id: &str) -> Result<CommentMap, CatalogError> {
    let sidecar = db_file.with_file_name(format!("{db_id}.comments.json"));
    if !sidecar.is_file() {
        return Ok(CommentMap::new());
    }
    let text = fs::read_to_string(&sidecar).map_err(|e| CatalogError::Comments {
        path: sidecar.clone(),
        message: e.to_string(),
    })?;
    let raw: BTreeMap<String, BTreeMap<String, String>> =
        serde_json::from_str(&text).map_err(|e| CatalogError::Comments {
            path: sidecar.clone(),
            message: e.to_string(),
        })?;
    Ok(raw
        .into_iter()
        .map(|(t, cols)| {
            (
                t.to_lowercase(),
                cols.into_iter().map(|(c, v)| (c.to_lowercase(), v)).collect(),
            )
        })
        .collect())
}

/// Read a SQLite file into a [`SchemaGraph`]. The db id is the file stem.
pub fn introspect(db_file: &Path) -> Result<SchemaGraph, CatalogError> {
    let conn = open_read_only(db_file)?;
    let db_id = db_file
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let comments = load_comments(db_file, &db_id)?;
    let read_err = |e: rusqlite::Error| CatalogError::Read {
        path: db_file.to_path_buf(),
        message: e.to_string(),
    };

    let table_names: Vec<String> = {
        let mut stmt = conn
            .prepare(
                "SELECT name FROM sqlite_master WHERE type = 'table' \
                 AND name NOT LIKE 'sqlite_%' ORDER BY rowid",
            )
            .map_err(read_err)?;
        let rows = stmt.query_map([], |r| r.get::<_, String>(0)).map_err(read_err)?;
        rows.collect::<Result<_, _>>().map_err(read_err)?
    };

    let mut tables = Vec::with_capacity(table_names.len());
    let mut raw_fks = Vec::new();
    for name in &table_names {
        let mut pk: Vec<(i64, String)> = Vec::new();
        let mut columns = Vec::new();
        {
            let mut stmt = conn
                .prepare(&format!("PRAGMA table_info({})", quote_ident(name)))
                .map_err(read_err)?;
            let mut rows = stmt.query([]).map_err(read_err)?;
            while let Some(row) = rows.next().map_err(read_err)? {
                let col: String = row.get(1).map_err(read_err)?;
                let ty: Option<String> = row.get(2).map_err(read_err)?;
                let pk_pos: i64 = row.get(5).map_err(read_err)?;
                if pk_pos > 0 {
                    pk.push((pk_pos, col.clone()));
                }
                let comment = comments
                    .get(&name.to_lowercase())
                    .and_then(|m| m.get(&col.to_lowercase()))
                    .cloned()
                    .unwrap_or_else(|| col.clone());
                columns.push(ColumnDef {
                    declared_type: ty.unwrap_or_default().to_uppercase(),
                    comment,
                    samples: Vec::new(),
                    name: col,
                });
            }
        }
        for c in &mut columns {
            c.samples = sample_values(&conn, name, &c.name).map_err(read_err)?;
        }
        pk.sort();
        {
            let mut stmt = conn
                .prepare(&format!("PRAGMA foreign_key_list({})", quote_ident(name)))
                .map_err(read_err)?;
            let mut rows = stmt.query([]).map_err(read_err)?;
            while let Some(row) = rows.next().map_err(read_err)? {
                let seq: i64 = row.get(1).map_err(read_err)?;
                let target: String = row.get(2).map_err(read_err)?;
                let from: String = row.get(3).map_err(read_err)?;
                let to: Option<String> = row.get(4).map_err(read_err)?;
                raw_fks.push((name.clone(), from, target, to, seq));
            }
        }
        tables.push(TableDef {
            name: name.clone(),
            columns,
            primary_key: pk.into_iter().map(|(_, c)| c).collect(),
        });
    }

    let mut foreign_keys = Vec::new();
    for (from_table, from_col, to_table, to_col, seq) in raw_fks {
        let Some(target) = tables.iter().find(|t| t.name.eq_ignore_ascii_case(&to_table)) else {
            log::warn!("{db_id}: foreign key {from_table}.{from_col} targets missing table {to_table}");
            continue;
        };
        let to_col = match to_col {
            Some(c) => target.column(&c).map(|cd| cd.name.clone()),
            None => target.primary_key.get(seq as usize).cloned(),
        };
        let source = tables.iter().find(|t| t.name == from_table).expect("source table exists");
        match (to_col, source.column(&from_col)) {
            (Some(to_column), Some(fc)) => foreign_keys.push(ForeignKey {
                from_table: from_table.clone(),
                from_column: fc.name.clone(),
                to_table: target.name.clone(),
                to_column,
            }),
            _ => log::warn!("{db_id}: dropping unresolvable foreign key on {from_table}.{from_col}"),
        }
    }

    Ok(SchemaGraph {
        db_id,
        tables,
        foreign_keys,
    })
}

/// Up to two distinct, non-empty, short values from the first rows of the
/// column, in storage order.
fn sample_values(conn: &Connection, table: &str, column: &str) -> rusqlite::Result<Vec<SqlValue>> {
    let sql = format!(
        "SELECT {c} FROM {t} WHERE {c} IS NOT NULL LIMIT 200",
        c = quote_ident(column),
        t = quote_ident(table)
    );
    let mut stmt = conn.prepare(&sql)?;
    let mut rows = stmt.query([])?;
    let mut out: Vec<SqlValue> = Vec::new();
    while let Some(row) = rows.next()? {
        let v = SqlValue::from(row.get_ref(0)?);
        let keep = match &v {
            SqlValue::Text(t) => !t.trim().is_empty() && t.chars().count() <= SAMPLE_VALUE_MAX_CHARS,
            SqlValue::Integer(_) | SqlValue::Real(_) => true,
            _ => false,
        };
        if keep && !out.contains(&v) {
            out.push(v);
            if out.len() == MAX_SAMPLE_VALUES {
                break;
            }
        }
    }
    Ok(out)
}

/// Locates database files under a Bird/Spider style root
/// (`<root>/<db_id>/<db_id>.sqlite`, or `<root>/<db_id>.sqlite`) and caches
/// their graphs and value indexes.
#[derive(Debug)]
pub struct Catalog {
    root: PathBuf,
    index_config: IndexConfig,
    graphs: Mutex<HashMap<String, Arc<SchemaGraph>>>,
    indexes: Mutex<HashMap<String, Arc<ValueIndex>>>,
}

const DB_EXTENSIONS: [&str; 3] = ["sqlite", "db", "sqlite3"];

impl Catalog {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self::with_index_config(root, IndexConfig::default())
    }

    pub fn with_index_config(root: impl Into<PathBuf>, index_config: IndexConfig) -> Self {
        Self {
            root: root.into(),
            index_config,
            graphs: Mutex::new(HashMap::new()),
            indexes: Mutex::new(HashMap::new()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn db_path(&self, db_id: &str) -> Result<PathBuf, CatalogError> {
        for ext in DB_EXTENSIONS {
            let nested = self.root.join(db_id).join(format!("{db_id}.{ext}"));
            if nested.is_file() {
                return Ok(nested);
            }
            let flat = self.root.join(format!("{db_id}.{ext}"));
            if flat.is_file() {
                return Ok(flat);
            }
        }
        Err(CatalogError::UnknownDb {
            db_id: db_id.to_string(),
            root: self.root.clone(),
        })
    }

    /// All database ids under the root, sorted.
    pub fn db_ids(&self) -> Vec<String> {
        let mut ids = BTreeSet::new();
        if let Ok(entries) = fs::read_dir(&self.root) {
            for e in entries.flatten() {
                let p = e.path();
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned());
                if p.is_dir() {
                    if let Some(id) = stem {
                        if self.db_path(&id).is_ok() {
                            ids.insert(id);
                        }
                    }
                } else if p
                    .extension()
                    .is_some_and(|x| DB_EXTENSIONS.iter().any(|e| x == *e))
                {
                    if let Some(id) = stem {
                        ids.insert(id);
                    }
                }
            }
        }
        ids.into_iter().collect()
    }

    pub fn graph(&self, db_id: &str) -> Result<Arc<SchemaGraph>, CatalogError> {
        if let Some(g) = self.graphs.lock().expect("catalog lock").get(db_id) {
            return Ok(g.clone());
        }
        let g = Arc::new(introspect(&self.db_path(db_id)?)?);
        self.graphs
            .lock()
            .expect("catalog lock")
            .insert(db_id.to_string(), g.clone());
        Ok(g)
    }

    pub fn index(&self, db_id: &str) -> Result<Arc<ValueIndex>, CatalogError> {
        if let Some(i) = self.indexes.lock().expect("catalog lock").get(db_id) {
            return Ok(i.clone());
        }
        let graph = self.graph(db_id)?;
        let idx = Arc::new(build_value_index(
            &self.db_path(db_id)?,
            &graph,
            &self.index_config,
        )?);
        self.indexes
            .lock()
            .expect("catalog lock")
            .insert(db_id.to_string(), idx.clone());
        Ok(idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support;

    #[test]
    fn school_fixture_introspects() {
        let dir = tempfile::tempdir().unwrap();
        let path = test_support::build_db(dir.path(), "school");
        let g = introspect(&path).unwrap();
        assert_eq!(g.db_id, "school");
        assert_eq!(g.tables.len(), 1);
        let t = &g.tables[0];
        assert_eq!(t.name, "schools");
        assert_eq!(t.columns.len(), 4);
        assert_eq!(t.primary_key, vec!["cdscode".to_string()]);
        // Direct query of the first two rows.
        let conn = Connection::open(&path).unwrap();
        let first: Vec<String> = conn
            .prepare("SELECT city FROM schools LIMIT 2")
            .unwrap()
            .query_map([], |r| r.get(0))
            .unwrap()
            .map(Result::unwrap)
            .collect();
        let city = t.column("city").unwrap();
        let mut expected: Vec<SqlValue> = Vec::new();
        for c in first {
            let v = SqlValue::Text(c);
            if !expected.contains(&v) {
                expected.push(v);
            }
        }
        assert_eq!(city.samples, expected);
        assert_eq!(city.comment, "city");
    }

    #[test]
    fn empty_database_has_no_tables() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.sqlite");
        Connection::open(&path).unwrap().execute_batch("PRAGMA user_version = 1;").unwrap();
        let g = introspect(&path).unwrap();
        assert!(g.tables.is_empty());
        assert!(g.foreign_keys.is_empty());
    }

    #[test]
    fn foreign_keys_are_captured() {
        let dir = tempfile::tempdir().unwrap();
        let path = test_support::build_db(dir.path(), "concert");
        let g = introspect(&path).unwrap();
        // Cross-check against the pragma listing.
        let conn = Connection::open(&path).unwrap();
        let n: i64 = conn
            .query_row("SELECT count(*) FROM pragma_foreign_key_list('concert')", [], |r| r.get(0))
            .unwrap();
        assert_eq!(n, 1);
        assert_eq!(
            g.foreign_keys,
            vec![ForeignKey {
                from_table: "concert".into(),
                from_column: "singer_id".into(),
                to_table: "singer".into(),
                to_column: "singer_id".into(),
            }]
        );
    }

    #[test]
    fn comments_sidecar_overrides_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = test_support::build_db(dir.path(), "school");
        fs::write(
            dir.path().join("school.comments.json"),
            r#"{"schools": {"CDSCode": "school identifier"}}"#,
        )
        .unwrap();
        let g = introspect(&path).unwrap();
        assert_eq!(g.tables[0].column("cdscode").unwrap().comment, "school identifier");
    }

    #[test]
    fn corrupt_file_is_catalog_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.sqlite");
        fs::write(&path, b"this is not a database at all, not even close....").unwrap();
        assert!(introspect(&path).is_err());
        assert!(introspect(&dir.path().join("missing.sqlite")).is_err());
    }

    #[test]
    fn catalog_resolves_nested_and_flat_layouts() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("school")).unwrap();
        test_support::build_db(&dir.path().join("school"), "school");
        test_support::build_db(dir.path(), "concert");
        let cat = Catalog::new(dir.path());
        assert_eq!(cat.db_ids(), vec!["concert".to_string(), "school".to_string()]);
        assert!(cat.db_path("school").unwrap().ends_with("school/school.sqlite"));
        assert!(cat.graph("nope").is_err());
        assert_eq!(cat.graph("school").unwrap().tables.len(), 1);
    }
}
